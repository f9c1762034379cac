"""Queries, result lists and relevance assessments, plus the relational
primitives (join, group-sort, top-k selection, attribute mapping and grouped
aggregation) that the operator semantics are written against.

All frames are immutable. Within a query, ties are always broken by docno
ascending so every sort is total and reproducible. Ranks are 0-based.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Sequence, TextIO

from .errors import ContractViolation, FormatError, InvalidK, PipertError, UndefinedScore


class _Undefined:
    """The undefined score produced by set operators.

    Any arithmetic or ordering on it raises :class:`UndefinedScore`, so misuse
    of a set-operator output is reported instead of propagating NaN.
    """

    __slots__ = ()
    _instance: "_Undefined | None" = None

    def __new__(cls) -> "_Undefined":
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "UNDEFINED"

    def __reduce__(self):
        return (_Undefined, ())

    def _fail(self, *args):
        raise UndefinedScore("arithmetic on an undefined score")

    __add__ = __radd__ = __sub__ = __rsub__ = _fail
    __mul__ = __rmul__ = __truediv__ = __rtruediv__ = __neg__ = _fail
    __lt__ = __le__ = __gt__ = __ge__ = _fail
    __float__ = _fail


UNDEFINED = _Undefined()


def is_undefined(score) -> bool:
    return score is UNDEFINED


# ---------------------------------------------------------------------------
# queries


@dataclass(frozen=True)
class Query:
    qid: str
    text: str = ""
    terms: tuple[tuple[str, float], ...] | None = None

    def __post_init__(self) -> None:
        if not self.qid:
            raise ContractViolation("query id must be non-empty")
        if self.terms is not None:
            if not isinstance(self.terms, tuple):
                object.__setattr__(self, "terms", tuple(self.terms))
            for term, weight in self.terms:
                if not math.isfinite(weight) or weight < 0:
                    raise ContractViolation(f"query {self.qid}: bad weight {weight!r} for {term!r}")
        if not self.text and not self.terms:
            raise ContractViolation(f"query {self.qid} has neither text nor terms")

    @classmethod
    def weighted(cls, qid: str, weights: Mapping[str, float], text: str = "") -> "Query":
        return cls(qid, text, tuple((t, float(w)) for t, w in weights.items()))

    def term_weights(self) -> dict[str, float]:
        return dict(self.terms) if self.terms else {}


@dataclass(frozen=True)
class QueryFrame:
    queries: tuple[Query, ...] = ()

    def __post_init__(self) -> None:
        if not isinstance(self.queries, tuple):
            object.__setattr__(self, "queries", tuple(self.queries))
        seen = set()
        for q in self.queries:
            if q.qid in seen:
                raise ContractViolation(f"duplicate query id {q.qid!r}")
            seen.add(q.qid)

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, str]]) -> "QueryFrame":
        return cls(tuple(Query(qid, text) for qid, text in pairs))

    def __iter__(self) -> Iterator[Query]:
        return iter(self.queries)

    def __len__(self) -> int:
        return len(self.queries)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return QueryFrame(self.queries[i])
        return self.queries[i]

    @property
    def qids(self) -> list[str]:
        return [q.qid for q in self.queries]

    def get(self, qid: str) -> Query | None:
        for q in self.queries:
            if q.qid == qid:
                return q
        return None


# ---------------------------------------------------------------------------
# results


@dataclass(frozen=True, slots=True)
class ResultRow:
    qid: str
    docno: str
    score: object  # float or UNDEFINED
    rank: int | None = None
    features: tuple[float, ...] | None = None


@dataclass(frozen=True)
class ResultFrame:
    rows: tuple[ResultRow, ...] = ()
    feature_names: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not isinstance(self.rows, tuple):
            object.__setattr__(self, "rows", tuple(self.rows))
        if not isinstance(self.feature_names, tuple):
            object.__setattr__(self, "feature_names", tuple(self.feature_names))
        keys = set()
        nfeat = len(self.feature_names)
        for row in self.rows:
            key = (row.qid, row.docno)
            if key in keys:
                raise ContractViolation(f"duplicate result key {key}")
            keys.add(key)
            if row.features is not None and len(row.features) != nfeat:
                raise ContractViolation(
                    f"row {key} has {len(row.features)} features, frame declares {nfeat}"
                )
            if row.score is not UNDEFINED and not math.isfinite(row.score):
                raise ContractViolation(f"row {key} has non-finite score {row.score!r}")

    def __iter__(self) -> Iterator[ResultRow]:
        return iter(self.rows)

    def __len__(self) -> int:
        return len(self.rows)

    def keys(self) -> set[tuple[str, str]]:
        return {(r.qid, r.docno) for r in self.rows}

    def qids(self) -> list[str]:
        """Query ids in order of first appearance."""
        return list(dict.fromkeys(r.qid for r in self.rows))

    def by_query(self) -> dict[str, list[ResultRow]]:
        groups: dict[str, list[ResultRow]] = {}
        for row in self.rows:
            groups.setdefault(row.qid, []).append(row)
        return groups

    def for_query(self, qid: str) -> "ResultFrame":
        return ResultFrame(tuple(r for r in self.rows if r.qid == qid), self.feature_names)

    @property
    def has_features(self) -> bool:
        return bool(self.feature_names)

    def validate(self) -> None:
        """Check the rank invariant on top of the construction-time checks."""
        for qid, rows in self.by_query().items():
            ranks = [r.rank for r in rows]
            if all(r is None for r in ranks):
                continue
            if sorted(ranks) != list(range(len(rows))):
                raise ContractViolation(f"query {qid}: ranks are not 0..{len(rows) - 1}")
            ordered = sorted(rows, key=lambda r: r.rank)
            for a, b in zip(ordered, ordered[1:]):
                if a.score is UNDEFINED or b.score is UNDEFINED:
                    raise ContractViolation(f"query {qid}: ranked rows with undefined scores")
                if a.score < b.score or (a.score == b.score and a.docno > b.docno):
                    raise ContractViolation(f"query {qid}: rank order disagrees with scores")


# ---------------------------------------------------------------------------
# relevance assessments


@dataclass(frozen=True)
class Qrel:
    qid: str
    docno: str
    label: int


class QrelSet:
    """Graded judgments keyed by (qid, docno)."""

    def __init__(self, qrels: Iterable[Qrel] = ()) -> None:
        self._by_query: dict[str, dict[str, int]] = {}
        for q in qrels:
            if q.label < 0:
                raise ContractViolation(f"negative label for ({q.qid}, {q.docno})")
            judged = self._by_query.setdefault(q.qid, {})
            if q.docno in judged:
                raise ContractViolation(f"duplicate judgment for ({q.qid}, {q.docno})")
            judged[q.docno] = int(q.label)

    @classmethod
    def from_dict(cls, data: Mapping[str, Mapping[str, int]]) -> "QrelSet":
        return cls(Qrel(qid, docno, label) for qid, docs in data.items() for docno, label in docs.items())

    def __contains__(self, qid: str) -> bool:
        return qid in self._by_query

    def __len__(self) -> int:
        return sum(len(v) for v in self._by_query.values())

    def for_query(self, qid: str) -> dict[str, int]:
        return dict(self._by_query.get(qid, {}))

    def qids(self) -> list[str]:
        return list(self._by_query)

    def __iter__(self) -> Iterator[Qrel]:
        for qid, docs in self._by_query.items():
            for docno, label in docs.items():
                yield Qrel(qid, docno, label)


# ---------------------------------------------------------------------------
# relational primitives


@dataclass(frozen=True, slots=True)
class JoinedRow:
    qid: str
    docno: str
    sides: tuple[ResultRow, ...]


def natural_join(*frames: ResultFrame) -> list[JoinedRow]:
    """Inner join on (qid, docno). Output follows the first frame's row order."""
    if not frames:
        return []
    lookups = [{(r.qid, r.docno): r for r in f.rows} for f in frames[1:]]
    joined = []
    for row in frames[0].rows:
        key = (row.qid, row.docno)
        sides = [row]
        for lookup in lookups:
            other = lookup.get(key)
            if other is None:
                break
            sides.append(other)
        else:
            joined.append(JoinedRow(row.qid, row.docno, tuple(sides)))
    return joined


def _query_order(rows: Sequence[ResultRow], qid_order: Sequence[str] | None) -> list[str]:
    present = list(dict.fromkeys(r.qid for r in rows))
    if qid_order is None:
        return present
    known = set(present)
    ordered = [q for q in qid_order if q in known]
    listed = set(ordered)
    return ordered + [q for q in present if q not in listed]


def _sorted_group(rows: list[ResultRow], key: str, descending: bool) -> list[ResultRow]:
    if key == "score":
        for r in rows:
            if r.score is UNDEFINED:
                raise UndefinedScore(f"cannot sort ({r.qid}, {r.docno}): score is undefined")
        # two stable passes: docno ascending, then score
        by_docno = sorted(rows, key=lambda r: r.docno)
        return sorted(by_docno, key=lambda r: r.score, reverse=descending)
    if key == "docno":
        return sorted(rows, key=lambda r: r.docno, reverse=descending)
    raise ValueError(f"unsupported sort key {key!r}")


def group_sort(
    frame: ResultFrame,
    key: str = "score",
    order: str = "desc",
    qid_order: Sequence[str] | None = None,
) -> ResultFrame:
    """Sort rows within each query and reassign ranks 0..n-1.

    Groups appear in ``qid_order`` when given, otherwise in order of first
    appearance.
    """
    if order not in ("asc", "desc"):
        raise ValueError(f"order must be 'asc' or 'desc', not {order!r}")
    groups = frame.by_query()
    out = []
    for qid in _query_order(frame.rows, qid_order):
        ranked = _sorted_group(groups[qid], key, order == "desc")
        out.extend(replace(r, rank=i) for i, r in enumerate(ranked))
    return ResultFrame(tuple(out), frame.feature_names)


def select_topk(frame: ResultFrame, k: int, qid_order: Sequence[str] | None = None) -> ResultFrame:
    """Keep the k highest-scoring rows of each query (sorting first)."""
    if not isinstance(k, int) or k <= 0:
        raise InvalidK(f"k must be a positive integer, got {k!r}")
    ranked = group_sort(frame, "score", "desc", qid_order)
    return ResultFrame(tuple(r for r in ranked.rows if r.rank < k), frame.feature_names)


def map_attr(frame: ResultFrame, fn: Callable[[ResultRow], object], target: str = "score") -> ResultFrame:
    """Replace one attribute of every row with ``fn(row)``; keys and order are kept."""
    if target not in ("score", "rank", "features"):
        raise ValueError(f"cannot map attribute {target!r}")
    out = []
    for row in frame.rows:
        try:
            value = fn(row)
        except PipertError as err:
            err.push_stage(f"row({row.qid},{row.docno})")
            raise
        except Exception as err:
            raise ContractViolation(f"mapping failed on row ({row.qid}, {row.docno}): {err}") from err
        out.append(replace(row, **{target: value}))
    return ResultFrame(tuple(out), frame.feature_names)


def group_aggregate(frame: ResultFrame, agg: str) -> dict[str, float]:
    if agg not in ("min", "max"):
        raise ValueError(f"unsupported aggregate {agg!r}")
    pick = min if agg == "min" else max
    result: dict[str, float] = {}
    for row in frame.rows:
        if row.score is UNDEFINED:
            raise UndefinedScore(f"cannot aggregate ({row.qid}, {row.docno}): score is undefined")
        result[row.qid] = row.score if row.qid not in result else pick(result[row.qid], row.score)
    return result


# ---------------------------------------------------------------------------
# TREC text formats


def read_topics(source: str | Path | TextIO) -> QueryFrame:
    """Tab-separated ``qid<TAB>query text`` lines."""
    pairs = []
    for lineno, line in enumerate(_lines(source), 1):
        line = line.rstrip("\n").rstrip("\r")
        if not line.strip():
            continue
        qid, sep, text = line.partition("\t")
        if not sep:
            raise FormatError(f"topics line {lineno}: expected 'qid<TAB>text'")
        pairs.append((qid.strip(), text.strip()))
    return QueryFrame.from_pairs(pairs)


def write_topics(queries: QueryFrame, out: str | Path) -> None:
    with open(out, "w", encoding="utf-8") as fh:
        for q in queries:
            fh.write(f"{q.qid}\t{q.text}\n")


def read_qrels(source: str | Path | TextIO) -> QrelSet:
    """Whitespace-separated ``qid 0 docno label`` lines."""
    qrels = []
    for lineno, line in enumerate(_lines(source), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 4:
            raise FormatError(f"qrels line {lineno}: expected 4 columns, got {len(parts)}")
        qid, _, docno, label = parts
        try:
            qrels.append(Qrel(qid, docno, int(label)))
        except ValueError:
            raise FormatError(f"qrels line {lineno}: label {label!r} is not an integer") from None
    return QrelSet(qrels)


def write_qrels(qrels: QrelSet, out: str | Path) -> None:
    with open(out, "w", encoding="utf-8") as fh:
        for q in qrels:
            fh.write(f"{q.qid} 0 {q.docno} {q.label}\n")


def format_run(frame: ResultFrame, tag: str = "pipert") -> str:
    """Render ``qid Q0 docno rank score tag`` lines, ranks 0-based."""
    if any(r.rank is None for r in frame.rows):
        frame = group_sort(frame)
    lines = []
    for row in frame.rows:
        if row.score is UNDEFINED:
            raise UndefinedScore(f"cannot write ({row.qid}, {row.docno}): score is undefined")
        lines.append(f"{row.qid} Q0 {row.docno} {row.rank} {row.score:.6f} {tag}\n")
    return "".join(lines)


def write_run(frame: ResultFrame, out: str | Path, tag: str = "pipert") -> None:
    Path(out).write_text(format_run(frame, tag), encoding="utf-8")


def read_run(source: str | Path | TextIO) -> ResultFrame:
    rows = []
    for lineno, line in enumerate(_lines(source), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 6:
            raise FormatError(f"run line {lineno}: expected 6 columns, got {len(parts)}")
        qid, _, docno, rank, score, _tag = parts
        rows.append(ResultRow(qid, docno, float(score), int(rank)))
    return ResultFrame(tuple(rows))


def _lines(source) -> Iterable[str]:
    if hasattr(source, "read"):
        return source.read().splitlines()
    return Path(source).read_text(encoding="utf-8").splitlines()
