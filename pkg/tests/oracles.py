"""Independent reference implementations used by the test suite.

Nothing here imports the engine's scoring, joining or metric code; each oracle
works from first principles on plain dicts and lists.
"""

from __future__ import annotations

import math
import random
import re
from collections import Counter

from nltk.stem.porter import PorterStemmer

# ---------------------------------------------------------------------------
# relational oracles over {(qid, docno): score}


def join(*frames: dict) -> dict:
    keys = set(frames[0])
    for f in frames[1:]:
        keys &= set(f)
    return {k: tuple(f[k] for f in frames) for k in keys}


def ranked(scores: dict, qid_order: list[str]) -> list[tuple[str, str, float, int]]:
    """(qid, docno, score, rank) sorted per query by score desc then docno."""
    out = []
    by_q: dict[str, list] = {}
    for (q, d), s in scores.items():
        by_q.setdefault(q, []).append((d, s))
    for q in qid_order:
        rows = sorted(by_q.get(q, []), key=lambda x: (-x[1], x[0]))
        out.extend((q, d, s, i) for i, (d, s) in enumerate(rows))
    return out


def plus(a: dict, b: dict) -> dict:
    return {k: x + y for k, (x, y) in join(a, b).items()}


def scalar(alpha: float, a: dict) -> dict:
    return {k: alpha * v for k, v in a.items()}


def cutoff(a: dict, k: int, qid_order) -> dict:
    return {(q, d): s for q, d, s, r in ranked(a, qid_order) if r < k}


def concat(a: dict, b: dict, eps: float = 0.001) -> dict:
    out = dict(a)
    qids = {q for q, _ in b}
    for q in qids:
        head = {d: s for (qq, d), s in a.items() if qq == q}
        rest = {d: s for (qq, d), s in b.items() if qq == q and d not in head}
        if not rest:
            continue
        shift = (min(head.values()) - max(rest.values()) - eps) if head else 0.0
        for d, s in rest.items():
            out[(q, d)] = s + shift
    return out


def random_frame(rng: random.Random, qids, docs, max_rows: int = 50) -> dict:
    n = rng.randint(0, max_rows)
    keys = {(rng.choice(qids), rng.choice(docs)) for _ in range(n)}
    return {k: round(rng.uniform(-10, 10), rng.choice([0, 1, 3, 6])) for k in keys}


# ---------------------------------------------------------------------------
# text and scoring oracles

_stemmer = PorterStemmer(mode=PorterStemmer.ORIGINAL_ALGORITHM)
STOP = set(
    "a an and are as at be but by for if in into is it no not of on or such that the their then there these they this to was will with".split()
)


def analyze(text: str, stem: bool = True) -> list[str]:
    words = [w for w in re.findall(r"[^\W_]+", text.lower()) if w not in STOP]
    return [_stemmer.stem(w) for w in words] if stem else words


class BruteCollection:
    """Collection statistics recomputed directly from the raw documents."""

    def __init__(self, docs: list[tuple[str, str]], stem: bool = True) -> None:
        self.docnos = [d for d, _ in docs]
        self.vectors = [Counter(analyze(t, stem)) for _, t in docs]
        self.lens = [sum(v.values()) for v in self.vectors]
        self.N = len(docs)
        self.T = sum(self.lens)
        self.avdl = self.T / self.N
        self.df = Counter()
        self.cf = Counter()
        for v in self.vectors:
            for t, c in v.items():
                self.df[t] += 1
                self.cf[t] += c

    def bm25(self, qterms: dict, i: int, k1=1.2, b=0.75) -> float:
        s = 0.0
        for t, w in qterms.items():
            tf = self.vectors[i].get(t, 0)
            if not tf:
                continue
            df = self.df[t]
            idf = math.log(1 + (self.N - df + 0.5) / (df + 0.5))
            s += w * idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * self.lens[i] / self.avdl))
        return s

    def tfidf(self, qterms: dict, i: int, k1=1.2, b=0.75) -> float:
        s = 0.0
        for t, w in qterms.items():
            tf = self.vectors[i].get(t, 0)
            if not tf:
                continue
            norm = k1 * (1 - b + b * self.lens[i] / self.avdl)
            s += w * math.log2(self.N / self.df[t]) * tf / (tf + norm)
        return s

    def ql(self, qterms: dict, i: int, mu=2500.0) -> float:
        s = 0.0
        dl = self.lens[i]
        for t, w in qterms.items():
            tf = self.vectors[i].get(t, 0)
            p = self.cf[t] / self.T
            s += w * (math.log(1 + tf / (mu * p)) + math.log(mu / (dl + mu)))
        return s

    def matching(self, qterms: dict) -> list[int]:
        return [i for i, v in enumerate(self.vectors) if any(t in v for t in qterms)]


# ---------------------------------------------------------------------------
# metric oracles (deliberately written differently from the engine)


def oracle_ap(ranking: list[str], labels: dict) -> float:
    rel = {d for d, l in labels.items() if l > 0}
    if not rel:
        return 0.0
    precisions = []
    for cut in range(1, len(ranking) + 1):
        if ranking[cut - 1] in rel:
            precisions.append(len(rel.intersection(ranking[:cut])) / cut)
    return sum(precisions) / len(rel)


def oracle_ndcg(ranking: list[str], labels: dict, k: int | None = None) -> float:
    depth = len(ranking) if k is None else k
    dcg = 0.0
    for pos, d in enumerate(ranking[:depth], start=1):
        dcg += max(labels.get(d, 0), 0) / math.log(pos + 1, 2)
    ideal = sorted((l for l in labels.values() if l > 0), reverse=True)
    if k is not None:
        ideal = ideal[:k]
    idcg = sum(l / math.log(pos + 1, 2) for pos, l in enumerate(ideal, start=1))
    return dcg / idcg if idcg else 0.0


# ---------------------------------------------------------------------------
# corpora

def zipf_corpus(n_docs: int, seed: int, vocab_size: int = 400, mean_len: int = 30) -> list[tuple[str, str]]:
    """Synthetic documents whose word frequencies follow a Zipf law."""
    rng = random.Random(seed)
    vocab = [f"t{i}" for i in range(vocab_size)]
    weights = [1.0 / (r + 1) for r in range(vocab_size)]
    docs = []
    for i in range(n_docs):
        length = max(1, int(rng.expovariate(1.0 / mean_len)))
        docs.append((f"doc{i:06d}", " ".join(rng.choices(vocab, weights, k=length))))
    return docs


def metric_fixture(seed: int = 20):
    """Five queries over twenty documents with graded labels and a ranking each."""
    rng = random.Random(seed)
    docs = [f"D{i:02d}" for i in range(20)]
    runs, qrels = {}, {}
    for qi in range(5):
        qid = f"q{qi + 1}"
        ranking = rng.sample(docs, rng.randint(5, 20))
        judged = rng.sample(docs, rng.randint(4, 12))
        qrels[qid] = {d: rng.choice([0, 0, 1, 2, 3]) for d in judged}
        runs[qid] = ranking
    # guarantee at least one relevant document per query
    for qid in qrels:
        if not any(v > 0 for v in qrels[qid].values()):
            qrels[qid][docs[0]] = 1
    return runs, qrels
