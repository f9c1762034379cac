"""Weighting models and physical retrieval strategies over an :class:`Index`.

Three strategies share one scoring path so their outputs agree bit for bit:

* :func:`exhaustive_topk` -- document-at-a-time over every query-term posting.
* :func:`maxscore_topk` -- MaxScore dynamic pruning with exact per-term upper
  bounds. Rank-safe: same rows and scores as the exhaustive strategy.
* :func:`feature_retrieve` -- one traversal that keeps the per-candidate term
  frequencies ("fat postings") and derives extra query-dependent features
  from them without touching the posting lists again.

A document's score is always accumulated over query terms in query order from
the vector of its term frequencies, whichever strategy found it.
"""

from __future__ import annotations

import contextlib
import contextvars
import heapq
import math
from bisect import bisect_left
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

from .datamodel import Query, ResultFrame, ResultRow, UNDEFINED, group_sort
from .errors import DegenerateStats, DirectIndexMissing, EmptyFeedback, InvalidK, UndefinedScore, UnknownDocno
from .index import Index, tokenize

# ---------------------------------------------------------------------------
# weighting models


@dataclass(frozen=True)
class BM25:
    k1: float = 1.2
    b: float = 0.75

    def __post_init__(self) -> None:
        if not self.k1 > 0 or not 0 <= self.b <= 1:
            raise ValueError(f"BM25 needs k1 > 0 and 0 <= b <= 1, got k1={self.k1}, b={self.b}")

    @property
    def name(self) -> str:
        return "BM25" if (self.k1, self.b) == (1.2, 0.75) else f"BM25(k1={self.k1},b={self.b})"


@dataclass(frozen=True)
class TFIDF:
    k1 = 1.2
    b = 0.75

    @property
    def name(self) -> str:
        return "TFIDF"


@dataclass(frozen=True)
class QLDirichlet:
    mu: float = 2500.0

    def __post_init__(self) -> None:
        if not self.mu > 0:
            raise ValueError(f"Dirichlet mu must be positive, got {self.mu}")

    @property
    def name(self) -> str:
        return "QL" if self.mu == 2500.0 else f"QL(mu={self.mu})"


@dataclass(frozen=True)
class DocLength:
    """Query-independent feature: the document length in tokens."""

    @property
    def name(self) -> str:
        return "DOCLEN"


WeightingModel = BM25 | TFIDF | QLDirichlet

_MODEL_NAMES = {
    "BM25": BM25,
    "TFIDF": TFIDF,
    "TF_IDF": TFIDF,
    "QL": QLDirichlet,
    "QL_DIRICHLET": QLDirichlet,
    "DIRICHLETLM": QLDirichlet,
    "DOCLEN": DocLength,
}


def parse_model(name: str):
    try:
        return _MODEL_NAMES[name.upper()]()
    except KeyError:
        raise ValueError(f"unknown weighting model {name!r}; expected one of BM25, TFIDF, QL, DOCLEN") from None


@dataclass(frozen=True)
class CollectionStats:
    num_docs: int
    total_tokens: int
    avg_doclen: float

    @classmethod
    def of(cls, index: Index) -> "CollectionStats":
        return cls(index.num_docs, index.total_tokens, index.avg_doclen)


def wmodel_score(model, tf: int, df: int, cf: int, doclen: int, stats: CollectionStats, qweight: float = 1.0) -> float:
    """Contribution of one query term to one document's score."""
    n, avdl = stats.num_docs, stats.avg_doclen
    if n == 0 or avdl == 0:
        raise DegenerateStats("collection has no documents or no tokens")
    if isinstance(model, BM25):
        if tf == 0:
            return 0.0
        k1, b = model.k1, model.b
        idf = math.log(1 + (n - df + 0.5) / (df + 0.5))
        return qweight * idf * (tf * (k1 + 1)) / (tf + k1 * (1 - b + b * doclen / avdl))
    if isinstance(model, TFIDF):
        if tf == 0:
            return 0.0
        k1, b = model.k1, model.b
        idf = math.log2(n / df)
        return qweight * idf * tf / (tf + k1 * (1 - b + b * doclen / avdl))
    if isinstance(model, QLDirichlet):
        mu = model.mu
        return qweight * (math.log(1 + tf / (mu * cf / stats.total_tokens)) + math.log(mu / (doclen + mu)))
    raise TypeError(f"not a weighting model: {model!r}")


# ---------------------------------------------------------------------------
# statistics collection


@dataclass
class RetrievalStats:
    queries: int = 0
    postings_total: int = 0
    postings_scored: int = 0
    docs_scored: int = 0

    @property
    def postings_skipped(self) -> int:
        return self.postings_total - self.postings_scored

    def add(self, other: "RetrievalStats") -> None:
        self.queries += other.queries
        self.postings_total += other.postings_total
        self.postings_scored += other.postings_scored
        self.docs_scored += other.docs_scored

    def as_dict(self) -> dict[str, int]:
        return {
            "queries": self.queries,
            "postings_total": self.postings_total,
            "postings_scored": self.postings_scored,
            "postings_skipped": self.postings_skipped,
            "docs_scored": self.docs_scored,
        }


_active_stats: contextvars.ContextVar[RetrievalStats | None] = contextvars.ContextVar("pipert_stats", default=None)


@contextlib.contextmanager
def collect_stats() -> Iterator[RetrievalStats]:
    """Accumulate posting counters from every retrieval call inside the block."""
    stats = RetrievalStats()
    token = _active_stats.set(stats)
    try:
        yield stats
    finally:
        _active_stats.reset(token)


def _record(local: RetrievalStats) -> None:
    sink = _active_stats.get()
    if sink is not None:
        sink.add(local)


# ---------------------------------------------------------------------------
# per-query scoring


def query_terms(index: Index, query: Query) -> list[tuple[str, float]]:
    """Weighted index terms of a query, in query order, unknown terms dropped.

    Queries without explicit terms are tokenized with the index's options and
    repeated tokens merge into a larger weight.
    """
    if query.terms:
        weighted = [(t, w) for t, w in query.terms if w > 0]
    else:
        counts: dict[str, float] = {}
        for tok in tokenize(query.text, index.options):
            counts[tok] = counts.get(tok, 0.0) + 1.0
        weighted = list(counts.items())
    return [(t, w) for t, w in weighted if t in index.term_ids]


def _length_norms(index: Index, k1: float, b: float) -> list[float]:
    def compute():
        avdl = index.avg_doclen
        return [k1 * (1 - b + b * dl / avdl) for dl in index.doclens]

    return index.memo(("norms", k1, b), compute)


def _background(index: Index, mu: float) -> list[float]:
    return index.memo(("ql-bg", mu), lambda: [math.log(mu / (dl + mu)) for dl in index.doclens])


class QueryScorer:
    """Scores documents for one query under one model from term-frequency vectors.

    ``score(tfs, docid)`` sums per-term contributions in query order; this is
    the only place document scores are computed.
    """

    def __init__(self, index: Index, terms: Sequence[tuple[str, float]], model) -> None:
        if index.num_docs == 0 or index.avg_doclen == 0:
            raise DegenerateStats(f"index {index.name!r} is empty")
        self.index = index
        self.model = model
        self.terms = [t for t, _ in terms]
        self.weights = [w for _, w in terms]
        self.tids = [index.term_ids[t] for t in self.terms]
        n = index.num_docs
        if isinstance(model, BM25):
            self._norm = _length_norms(index, model.k1, model.b)
            self._k1p = model.k1 + 1
            self._unit = [math.log(1 + (n - index.df[tid] + 0.5) / (index.df[tid] + 0.5)) for tid in self.tids]
            self.score = self._score_bm25
            self._term = self._term_bm25
        elif isinstance(model, TFIDF):
            self._norm = _length_norms(index, model.k1, model.b)
            self._unit = [math.log2(n / index.df[tid]) for tid in self.tids]
            self.score = self._score_tfidf
            self._term = self._term_tfidf
        elif isinstance(model, QLDirichlet):
            mu = model.mu
            self._bg = _background(index, mu)
            self._mp = [mu * index.cf[tid] / index.total_tokens for tid in self.tids]
            self._unit = [1.0] * len(self.tids)
            self.score = self._score_ql
            self._term = self._term_ql
        elif isinstance(model, DocLength):
            self._unit = []
            self.score = lambda tfs, d: float(index.doclens[d])
            self._term = None
        else:
            raise TypeError(f"not a weighting model: {model!r}")
        # per-term weight factor: qweight times the model's term-only component
        self._w = [w * u for w, u in zip(self.weights, self._unit)]

    def contrib(self, i: int, tf: int, d: int) -> float:
        """Contribution of query term ``i`` with frequency ``tf`` to document ``d``."""
        return self._term(self._w[i], i, tf, d)

    # BM25: w * (tf * (k1 + 1)) / (tf + norm) where w = qweight * idf
    def _term_bm25(self, w: float, i: int, tf: int, d: int) -> float:
        return w * (tf * self._k1p) / (tf + self._norm[d])

    def _score_bm25(self, tfs: Sequence[int], d: int) -> float:
        nd, k1p = self._norm[d], self._k1p
        s = 0.0
        for w, tf in zip(self._w, tfs):
            if tf:
                s += w * (tf * k1p) / (tf + nd)
        return s

    def _term_tfidf(self, w: float, i: int, tf: int, d: int) -> float:
        return w * tf / (tf + self._norm[d])

    def _score_tfidf(self, tfs: Sequence[int], d: int) -> float:
        nd = self._norm[d]
        s = 0.0
        for w, tf in zip(self._w, tfs):
            if tf:
                s += w * tf / (tf + nd)
        return s

    def _term_ql(self, w: float, i: int, tf: int, d: int) -> float:
        return w * (math.log(1 + tf / self._mp[i]) + self._bg[d])

    def _score_ql(self, tfs: Sequence[int], d: int) -> float:
        bgd = self._bg[d]
        log = math.log
        s = 0.0
        for w, mp, tf in zip(self._w, self._mp, tfs):
            s += w * (log(1 + tf / mp) + bgd)
        return s

    def upper_bounds(self) -> list[float]:
        """Per-term bounds used for pruning: max(0, exact max contribution).

        Contributions of absent terms are never positive, so a doc's score is
        at most the sum of these bounds over the terms it contains. The exact
        maximum at unit query weight is cached on the index per (model, term).
        """
        out = []
        for i, (term, w) in enumerate(zip(self.terms, self.weights)):
            exact = self.index.memo(("ub", self.model, term), lambda i=i: self._unit_max(i))
            out.append(max(0.0, w * exact))
        return out

    def _unit_max(self, i: int) -> float:
        tid = self.tids[i]
        unit, term = self._unit[i], self._term
        best = -math.inf
        for d, tf in zip(self.index.post_docids[tid], self.index.post_tfs[tid]):
            c = term(unit, i, tf, d)
            if c > best:
                best = c
        return best


# ---------------------------------------------------------------------------
# top-k strategies


@dataclass(frozen=True, slots=True)
class Candidate:
    """A scored document with its per-query-term tf vector (the fat posting)."""

    docid: int
    docno: str
    score: float
    doclen: int
    tfs: tuple[int, ...]


def _finish(index: Index, heap: list) -> list[Candidate]:
    ranked = sorted(heap, reverse=True)
    return [Candidate(d, index.docnos[d], s, index.doclens[d], tfs) for s, _, d, tfs in ranked]


def _check_k(k: int) -> None:
    if not isinstance(k, int) or k < 1:
        raise InvalidK(f"k must be a positive integer, got {k!r}")


def exhaustive_candidates(index: Index, query: Query, model, k: int) -> list[Candidate]:
    _check_k(k)
    terms = query_terms(index, query)
    if not terms:
        return []
    scorer = QueryScorer(index, terms, model)
    m = len(terms)
    docid_lists = [index.post_docids[t] for t in scorer.tids]
    tf_lists = [index.post_tfs[t] for t in scorer.tids]
    lens = [len(x) for x in docid_lists]
    pos = [0] * m
    sentinel = index.num_docs
    cur = [docid_lists[i][0] if lens[i] else sentinel for i in range(m)]
    order_key = index.docno_order
    score = scorer.score
    heap: list = []
    scored = docs = 0
    rng = range(m)
    while True:
        d = min(cur)
        if d == sentinel:
            break
        tfs = [0] * m
        for i in rng:
            if cur[i] == d:
                p = pos[i]
                tfs[i] = tf_lists[i][p]
                p += 1
                pos[i] = p
                cur[i] = docid_lists[i][p] if p < lens[i] else sentinel
                scored += 1
        s = score(tfs, d)
        docs += 1
        entry = (s, -order_key[d], d, tuple(tfs))
        if len(heap) < k:
            heapq.heappush(heap, entry)
        elif entry > heap[0]:
            heapq.heapreplace(heap, entry)
    _record(RetrievalStats(1, sum(lens), scored, docs))
    return _finish(index, heap)


def maxscore_candidates(index: Index, query: Query, model, k: int) -> list[Candidate]:
    _check_k(k)
    terms = query_terms(index, query)
    if not terms:
        return []
    scorer = QueryScorer(index, terms, model)
    m = len(terms)
    docid_lists = [index.post_docids[t] for t in scorer.tids]
    tf_lists = [index.post_tfs[t] for t in scorer.tids]
    lens = [len(x) for x in docid_lists]
    ubs = scorer.upper_bounds()
    contrib = scorer.contrib
    score = scorer.score
    order_key = index.docno_order

    # terms ascending by upper bound; prefix[j] bounds any doc seen only in order[0..j]
    order = sorted(range(m), key=lambda i: (ubs[i], i))
    prefix = []
    acc = 0.0
    for i in order:
        acc += ubs[i]
        prefix.append(acc)

    pos = [0] * m
    heap: list = []
    threshold = -math.inf
    slack = 0.0
    n_nonessential = 0
    scored = docs = 0
    sentinel = index.num_docs
    while True:
        essential = order[n_nonessential:]
        d = sentinel
        for i in essential:
            p = pos[i]
            if p < lens[i] and docid_lists[i][p] < d:
                d = docid_lists[i][p]
        if d == sentinel:
            break

        tfs = [0] * m
        partial = 0.0
        for i in essential:
            p = pos[i]
            if p < lens[i] and docid_lists[i][p] == d:
                tf = tf_lists[i][p]
                tfs[i] = tf
                partial += contrib(i, tf, d)
                pos[i] = p + 1
                scored += 1

        pruned = False
        for j in range(n_nonessential - 1, -1, -1):
            if partial + prefix[j] < threshold - slack:
                pruned = True
                break
            i = order[j]
            p = bisect_left(docid_lists[i], d, pos[i])
            pos[i] = p
            if p < lens[i] and docid_lists[i][p] == d:
                tf = tf_lists[i][p]
                tfs[i] = tf
                partial += contrib(i, tf, d)
                scored += 1
        if pruned:
            continue

        s = score(tfs, d)
        docs += 1
        entry = (s, -order_key[d], d, tuple(tfs))
        if len(heap) < k:
            heapq.heappush(heap, entry)
        elif entry > heap[0]:
            heapq.heapreplace(heap, entry)
        else:
            continue
        if len(heap) == k:
            threshold = heap[0][0]
            # tolerate rounding differences between bound arithmetic and the canonical sum
            slack = 1e-9 * max(1.0, abs(threshold))
            while n_nonessential < m and prefix[n_nonessential] < threshold - slack:
                n_nonessential += 1
    _record(RetrievalStats(1, sum(lens), scored, docs))
    return _finish(index, heap)


def _to_frame(qid: str, cands: list[Candidate]) -> ResultFrame:
    return ResultFrame(tuple(ResultRow(qid, c.docno, c.score, i) for i, c in enumerate(cands)))


def exhaustive_topk(index: Index, query: Query, model, k: int) -> ResultFrame:
    """Exact top-k by full document-at-a-time evaluation."""
    return _to_frame(query.qid, exhaustive_candidates(index, query, model, k))


def maxscore_topk(index: Index, query: Query, model, k: int) -> ResultFrame:
    """Rank-safe MaxScore top-k; identical output to :func:`exhaustive_topk`."""
    return _to_frame(query.qid, maxscore_candidates(index, query, model, k))


# ---------------------------------------------------------------------------
# rescoring and fat feature retrieval


def rescore(index: Index, query: Query, model, candidates: ResultFrame) -> ResultFrame:
    """Score the given candidate documents of ``query`` from the posting lists."""
    rows = [r for r in candidates.rows if r.qid == query.qid]
    if not rows:
        return ResultFrame()
    docids = []
    for r in rows:
        d = index.docno_to_id.get(r.docno)
        if d is None:
            raise UnknownDocno(f"document {r.docno!r} is not in index {index.name!r}")
        docids.append(d)

    if isinstance(model, DocLength):
        out = [ResultRow(query.qid, r.docno, float(index.doclens[d])) for r, d in zip(rows, docids)]
        return group_sort(ResultFrame(tuple(out)))

    terms = query_terms(index, query)
    if not terms:
        scores = {d: 0.0 for d in docids}
    else:
        scorer = QueryScorer(index, terms, model)
        tf_vectors = _lookup_tfs(index, scorer.tids, docids)
        scores = {d: scorer.score(tf_vectors[d], d) for d in docids}
    out = [ResultRow(query.qid, r.docno, scores[d]) for r, d in zip(rows, docids)]
    return group_sort(ResultFrame(tuple(out)))


def _lookup_tfs(index: Index, tids: Sequence[int], docids: Sequence[int]) -> dict[int, list[int]]:
    """Walk each term's posting list to the requested docids (skipping by bisection)."""
    wanted = sorted(set(docids))
    tfs = {d: [0] * len(tids) for d in wanted}
    total = scored = 0
    for i, tid in enumerate(tids):
        plist, tlist = index.post_docids[tid], index.post_tfs[tid]
        n = len(plist)
        total += n
        p = 0
        for d in wanted:
            p = bisect_left(plist, d, p)
            if p == n:
                break
            if plist[p] == d:
                tfs[d][i] = tlist[p]
                scored += 1
    _record(RetrievalStats(1, total, scored, len(wanted)))
    return tfs


def feature_retrieve(
    index: Index,
    query: Query,
    first_model,
    k: int,
    feature_models: Sequence,
    maxscore_threshold: int = 500,
) -> ResultFrame:
    """Top-k under ``first_model`` with one feature per ``feature_models`` entry.

    Features are computed from the candidates' cached tf vectors; the posting
    lists are traversed once.
    """
    if not feature_models:
        raise ValueError("feature_retrieve needs at least one feature model")
    finder = maxscore_candidates if k <= maxscore_threshold else exhaustive_candidates
    cands = finder(index, query, first_model, k)
    names = tuple(m.name for m in feature_models)
    if not cands:
        return ResultFrame((), names)
    terms = query_terms(index, query)
    scorers = [QueryScorer(index, terms, m) for m in feature_models]
    rows = []
    for rank, c in enumerate(cands):
        feats = tuple(sc.score(c.tfs, c.docid) for sc in scorers)
        rows.append(ResultRow(query.qid, c.docno, c.score, rank, feats))
    return ResultFrame(tuple(rows), names)


# ---------------------------------------------------------------------------
# RM3 query expansion


def rm3_expand(
    index: Index,
    query: Query,
    results: ResultFrame,
    fb_docs: int = 3,
    fb_terms: int = 10,
    lam: float = 0.6,
) -> Query:
    """Mix the original query model with a relevance model from the top feedback docs.

    ``lam`` is the weight of the feedback model; 0 keeps the original terms only.
    """
    if index.direct is None:
        raise DirectIndexMissing(f"index {index.name!r} has no direct index; query expansion needs one")
    if not 0 <= lam <= 1:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    rows = [r for r in results.rows if r.qid == query.qid]
    if not rows:
        raise EmptyFeedback(f"no feedback documents for query {query.qid!r}")
    for r in rows:
        if r.score is UNDEFINED:
            raise UndefinedScore(f"feedback document {r.docno!r} has an undefined score")
    rows = sorted(sorted(rows, key=lambda r: r.docno), key=lambda r: r.score, reverse=True)[:fb_docs]

    if query.terms:
        original = {t: w for t, w in query.terms if w > 0}
    else:
        original = {}
        for tok in tokenize(query.text, index.options):
            original[tok] = original.get(tok, 0.0) + 1.0
    total = sum(original.values())
    p_orig = {t: w / total for t, w in original.items()} if total else {}

    top = max(r.score for r in rows)
    exps = [math.exp(r.score - top) for r in rows]
    z = sum(exps)
    p_fb: dict[str, float] = {}
    for r, e in zip(rows, exps):
        docid = index.docno_to_id.get(r.docno)
        if docid is None:
            raise UnknownDocno(f"document {r.docno!r} is not in index {index.name!r}")
        dl = index.doclens[docid]
        if dl == 0:
            continue
        weight = e / z
        tids, tfs = index.direct[docid]
        for tid, tf in zip(tids, tfs):
            term = index.terms[tid]
            p_fb[term] = p_fb.get(term, 0.0) + tf / dl * weight

    expansion = sorted((t for t in p_fb if t not in p_orig), key=lambda t: (-p_fb[t], t))[:fb_terms]
    mixed = {}
    for t in list(p_orig) + expansion:
        w = (1 - lam) * p_orig.get(t, 0.0) + lam * p_fb.get(t, 0.0)
        if w > 0:
            mixed[t] = w
    norm = sum(mixed.values())
    if norm == 0:
        mixed, norm = dict(p_orig), 1.0
    return Query(query.qid, query.text, tuple((t, w / norm) for t, w in mixed.items()))
