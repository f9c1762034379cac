"""Pipeline AST and its interpreter.

Transformers combine through eight operators into a tree of nodes instead of
being executed eagerly::

    >>  Then          +  Plus         *  Scalar       ** FeatUnion
    |   SetUnion      &  SetIntersect %  Cutoff       ^  Concat

Both operands of a binary operator receive the same (queries, results) input;
only ``>>`` threads one stage's output into the next. N-ary nodes flatten
nested nodes of their own kind on construction, so ``(a >> b) >> c`` and
``a >> (b >> c)`` build the same tree.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from numbers import Real
from typing import TYPE_CHECKING

from .datamodel import (
    UNDEFINED,
    QueryFrame,
    ResultFrame,
    ResultRow,
    group_sort,
    natural_join,
    select_topk,
)
from .errors import FeatureNameCollision, InvalidK, MissingResults, PipertError, UndefinedScore
from .retrieval import feature_retrieve, maxscore_topk, rescore

if TYPE_CHECKING:
    from .index import Index

CONCAT_EPSILON = 0.001


class Composable:
    """Operator overloads shared by transformers and pipeline nodes."""

    def __rshift__(self, other):
        return Then((as_node(self), as_node(other)))

    def __rrshift__(self, other):
        return Then((as_node(other), as_node(self)))

    def __add__(self, other):
        return Plus((as_node(self), as_node(other)))

    def __radd__(self, other):
        return Plus((as_node(other), as_node(self)))

    def __mul__(self, alpha):
        if not _is_number(alpha):
            return NotImplemented
        return Scalar(float(alpha), as_node(self))

    __rmul__ = __mul__

    def __pow__(self, other):
        return FeatUnion((as_node(self), as_node(other)))

    def __rpow__(self, other):
        return FeatUnion((as_node(other), as_node(self)))

    def __or__(self, other):
        return SetUnion((as_node(self), as_node(other)))

    def __ror__(self, other):
        return SetUnion((as_node(other), as_node(self)))

    def __and__(self, other):
        return SetIntersect((as_node(self), as_node(other)))

    def __rand__(self, other):
        return SetIntersect((as_node(other), as_node(self)))

    def __mod__(self, k):
        if not isinstance(k, int) or isinstance(k, bool):
            return NotImplemented
        return Cutoff(as_node(self), k)

    def __xor__(self, other):
        return Concat(as_node(self), as_node(other))

    def __rxor__(self, other):
        return Concat(as_node(other), as_node(self))


def _is_number(x) -> bool:
    return isinstance(x, Real) and not isinstance(x, bool)


class Node(Composable):
    """Base class of pipeline AST nodes."""

    kind = "Node"

    def children_nodes(self) -> tuple["Node", ...]:
        return ()

    def with_children(self, children: tuple["Node", ...]) -> "Node":
        return self

    def transform(self, queries: QueryFrame, results: ResultFrame | None = None):
        return execute(self, queries, results)

    def search(self, queries: QueryFrame) -> ResultFrame | None:
        return execute(self, queries)[1]

    def fit(self, train_queries, train_qrels, valid_queries=None, valid_qrels=None):
        from .transformers import fit_pipeline

        return fit_pipeline(self, train_queries, train_qrels, valid_queries, valid_qrels)

    def size(self) -> int:
        return 1 + sum(c.size() for c in self.children_nodes())


def as_node(obj) -> Node:
    if isinstance(obj, Node):
        return obj
    from .transformers import Transformer, Generic

    if isinstance(obj, Transformer):
        return Leaf(obj)
    if callable(obj):
        return Leaf(Generic(obj))
    raise TypeError(f"cannot use {obj!r} in a pipeline")


@dataclass(frozen=True)
class Leaf(Node):
    transformer: object
    kind = "Leaf"


class _NAry(Node):
    children: tuple

    def __post_init__(self) -> None:
        flat = []
        for child in self.children:
            child = as_node(child)
            if type(child) is type(self) and self._flattens(child):
                flat.extend(child.children)
            else:
                flat.append(child)
        if len(flat) < 2:
            raise ValueError(f"{type(self).__name__} needs at least two operands")
        object.__setattr__(self, "children", tuple(flat))

    def _flattens(self, child) -> bool:
        return True

    def children_nodes(self):
        return self.children

    def with_children(self, children):
        return replace(self, children=tuple(children))


@dataclass(frozen=True)
class Then(_NAry):
    children: tuple
    kind = "Then"


@dataclass(frozen=True)
class Plus(_NAry):
    """CombSUM over the natural join. ``lenient`` switches to an outer join
    where a missing side contributes 0."""

    children: tuple
    lenient: bool = False
    kind = "Plus"

    def _flattens(self, child) -> bool:
        return child.lenient == self.lenient


@dataclass(frozen=True)
class FeatUnion(_NAry):
    children: tuple
    kind = "FeatUnion"


@dataclass(frozen=True)
class SetUnion(_NAry):
    children: tuple
    kind = "SetUnion"


@dataclass(frozen=True)
class SetIntersect(_NAry):
    children: tuple
    kind = "SetIntersect"


@dataclass(frozen=True)
class Scalar(Node):
    alpha: float
    child: Node
    kind = "Scalar"

    def __post_init__(self) -> None:
        if not math.isfinite(self.alpha):
            raise ValueError(f"scalar weight must be finite, got {self.alpha}")
        object.__setattr__(self, "child", as_node(self.child))

    def children_nodes(self):
        return (self.child,)

    def with_children(self, children):
        return replace(self, child=children[0])


@dataclass(frozen=True)
class Cutoff(Node):
    child: Node
    k: int
    kind = "Cutoff"

    def __post_init__(self) -> None:
        if not isinstance(self.k, int) or self.k < 1:
            raise InvalidK(f"rank cutoff must be a positive integer, got {self.k!r}")
        object.__setattr__(self, "child", as_node(self.child))

    def children_nodes(self):
        return (self.child,)

    def with_children(self, children):
        return replace(self, child=children[0])


@dataclass(frozen=True)
class Concat(Node):
    first: Node
    second: Node
    kind = "Concat"

    def __post_init__(self) -> None:
        object.__setattr__(self, "first", as_node(self.first))
        object.__setattr__(self, "second", as_node(self.second))

    def children_nodes(self):
        return (self.first, self.second)

    def with_children(self, children):
        return replace(self, first=children[0], second=children[1])


@dataclass(frozen=True, eq=False)
class FusedRetrieveTopK(Node):
    """Full retrieval straight to depth k with MaxScore pruning (compiler output)."""

    index: "Index"
    model: object
    k: int
    kind = "FusedRetrieveTopK"

    def __eq__(self, other):
        return (
            type(other) is FusedRetrieveTopK
            and self.index is other.index
            and (self.model, self.k) == (other.model, other.k)
        )

    def __hash__(self):
        return hash((id(self.index), self.model, self.k))


@dataclass(frozen=True, eq=False)
class FusedFeatureRetrieve(Node):
    """Single-traversal retrieval computing extra features from fat postings (compiler output)."""

    index: "Index"
    model: object
    k: int
    feature_models: tuple
    kind = "FusedFeatureRetrieve"

    def __eq__(self, other):
        return (
            type(other) is FusedFeatureRetrieve
            and self.index is other.index
            and (self.model, self.k, self.feature_models) == (other.model, other.k, other.feature_models)
        )

    def __hash__(self):
        return hash((id(self.index), self.model, self.k, self.feature_models))


def node_label(node: Node) -> str:
    """Short name used for a score-only operand's column in a feature union."""
    if isinstance(node, Leaf):
        return getattr(node.transformer, "name", type(node.transformer).__name__)
    if isinstance(node, Then):
        return node_label(node.children[-1])
    if isinstance(node, (Scalar, Cutoff)):
        return node_label(node.child)
    if isinstance(node, (FusedRetrieveTopK, FusedFeatureRetrieve)):
        return node.model.name
    if isinstance(node, Concat):
        return node_label(node.first)
    return node.kind


# ---------------------------------------------------------------------------
# interpreter


def execute(node, queries: QueryFrame, results: ResultFrame | None = None):
    """Evaluate a pipeline bottom-up; returns (queries, results or None)."""
    node = as_node(node)
    handler = _HANDLERS.get(type(node))
    if handler is None:
        raise TypeError(f"no executor for {type(node).__name__}")
    return handler(node, queries, results)


def _run_child(parent: str, i: int, child: Node, queries, results):
    try:
        return execute(child, queries, results)
    except PipertError as err:
        err.push_stage(f"{parent}[{i}]")
        raise


def _need_results(parent: str, i: int, out) -> ResultFrame:
    if out is None:
        err = MissingResults(f"operand produced no results; {parent} needs a ranking from each operand")
        err.push_stage(f"{parent}[{i}]")
        raise err
    return out


def _exec_leaf(node: Leaf, queries, results):
    try:
        return node.transformer.transform(queries, results)
    except PipertError as err:
        err.push_stage(getattr(node.transformer, "name", "Leaf"))
        raise


def _exec_then(node: Then, queries, results):
    for i, child in enumerate(node.children):
        queries, results = _run_child("Then", i, child, queries, results)
    return queries, results


def _operand_frames(node: _NAry, queries, results) -> list[ResultFrame]:
    frames = []
    for i, child in enumerate(node.children):
        _, out = _run_child(node.kind, i, child, queries, results)
        frames.append(_need_results(node.kind, i, out))
    return frames


def _defined(row: ResultRow, op: str) -> float:
    if row.score is UNDEFINED:
        raise UndefinedScore(f"{op} needs defined scores; ({row.qid}, {row.docno}) has none")
    return row.score


def _exec_plus(node: Plus, queries, results):
    frames = _operand_frames(node, queries, results)
    out = []
    if not node.lenient:
        for j in natural_join(*frames):
            out.append(ResultRow(j.qid, j.docno, math.fsum(_defined(r, "+") for r in j.sides)))
    else:
        sums: dict[tuple[str, str], list[float]] = {}
        for frame in frames:
            for r in frame.rows:
                sums.setdefault((r.qid, r.docno), []).append(_defined(r, "+"))
        out = [ResultRow(q, d, math.fsum(v)) for (q, d), v in sums.items()]
    return queries, group_sort(ResultFrame(tuple(out)), qid_order=queries.qids)


def _exec_scalar(node: Scalar, queries, results):
    q_out, out = _run_child("Scalar", 0, node.child, queries, results)
    out = _need_results("Scalar", 0, out)
    alpha = node.alpha
    rows = tuple(replace(r, score=alpha * _defined(r, "*")) for r in out.rows)
    return q_out, group_sort(ResultFrame(rows, out.feature_names), qid_order=q_out.qids)


def _exec_featunion(node: FeatUnion, queries, results):
    frames = _operand_frames(node, queries, results)
    names: list[str] = []
    for child, frame in zip(node.children, frames):
        names.extend(frame.feature_names if frame.has_features else (node_label(child),))
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise FeatureNameCollision(f"feature names collide in feature union: {', '.join(dupes)}")
    rows = []
    for j in natural_join(*frames):
        feats: list[float] = []
        for frame, r in zip(frames, j.sides):
            if frame.has_features:
                feats.extend(r.features)
            else:
                feats.append(_defined(r, "**"))
        rows.append(ResultRow(j.qid, j.docno, j.sides[0].score, None, tuple(feats)))
    return queries, group_sort(ResultFrame(tuple(rows), tuple(names)), qid_order=queries.qids)


def _set_rows(queries: QueryFrame, keys: set[tuple[str, str]]) -> ResultFrame:
    by_q: dict[str, list[str]] = {}
    for qid, docno in keys:
        by_q.setdefault(qid, []).append(docno)
    order = [q for q in queries.qids if q in by_q] + sorted(q for q in by_q if queries.get(q) is None)
    rows = [ResultRow(q, d, UNDEFINED) for q in order for d in sorted(by_q[q])]
    return ResultFrame(tuple(rows))


def _exec_setunion(node: SetUnion, queries, results):
    frames = _operand_frames(node, queries, results)
    keys = set().union(*(f.keys() for f in frames))
    return queries, _set_rows(queries, keys)


def _exec_setintersect(node: SetIntersect, queries, results):
    frames = _operand_frames(node, queries, results)
    keys = frames[0].keys().intersection(*(f.keys() for f in frames[1:]))
    return queries, _set_rows(queries, keys)


def _exec_cutoff(node: Cutoff, queries, results):
    q_out, out = _run_child("Cutoff", 0, node.child, queries, results)
    out = _need_results("Cutoff", 0, out)
    return q_out, select_topk(out, node.k, qid_order=q_out.qids)


def concatenate(first: ResultFrame, second: ResultFrame, qid_order=None, epsilon: float = CONCAT_EPSILON) -> ResultFrame:
    """Append ``second`` below ``first`` per query.

    Rows of ``second`` already in ``first`` are dropped; the rest are shifted so
    the best of them scores ``epsilon`` below the worst row of ``first``. A
    query with no rows in ``first`` keeps its ``second`` rows unshifted.
    """
    for r in first.rows + second.rows:
        _defined(r, "^")
    firsts = first.by_query()
    seconds = second.by_query()
    keep_features = first.feature_names == second.feature_names
    rows = list(first.rows) if keep_features else [replace(r, features=None) for r in first.rows]
    for qid, rows2 in seconds.items():
        head = firsts.get(qid, [])
        taken = {r.docno for r in head}
        rest = [r for r in rows2 if r.docno not in taken]
        if not rest:
            continue
        feats = (lambda r: r.features) if keep_features else (lambda r: None)
        if not head:
            rows.extend(replace(r, features=feats(r)) for r in rest)
            continue
        lowest = min(r.score for r in head)
        highest = max(r.score for r in rest)
        rows.extend(replace(r, score=r.score - highest + lowest - epsilon, features=feats(r)) for r in rest)
    names = first.feature_names if keep_features else ()
    return group_sort(ResultFrame(tuple(rows), names), qid_order=qid_order)


def _exec_concat(node: Concat, queries, results):
    _, r1 = _run_child("Concat", 0, node.first, queries, results)
    _, r2 = _run_child("Concat", 1, node.second, queries, results)
    r1 = _need_results("Concat", 0, r1)
    r2 = _need_results("Concat", 1, r2)
    return queries, concatenate(r1, r2, queries.qids)


def _exec_fused_topk(node: FusedRetrieveTopK, queries, results):
    if results is not None:
        # rescore mode: same meaning as the unfused Cutoff(Retrieve) over given candidates
        frames = [rescore(node.index, q, node.model, results) for q in queries]
        merged = ResultFrame(tuple(r for f in frames for r in f.rows))
        return queries, select_topk(merged, node.k, qid_order=queries.qids)
    rows = []
    for q in queries:
        rows.extend(maxscore_topk(node.index, q, node.model, node.k).rows)
    return queries, ResultFrame(tuple(rows))


def _exec_fused_features(node: FusedFeatureRetrieve, queries, results):
    names = tuple(m.name for m in node.feature_models)
    rows = []
    if results is not None:
        # rescore mode; mirrors Then(Retrieve, FeatUnion(Retrieve...)) fed with candidates
        for q in queries:
            base = rescore(node.index, q, node.model, results)
            per_model = [rescore(node.index, q, m, base) for m in node.feature_models]
            lookup = [{r.docno: r.score for r in f.rows} for f in per_model]
            for r in per_model[0].rows:
                rows.append(ResultRow(q.qid, r.docno, r.score, None, tuple(l[r.docno] for l in lookup)))
    else:
        for q in queries:
            frame = feature_retrieve(node.index, q, node.model, node.k, node.feature_models)
            # a feature union scores each row by its left operand: the first feature
            ranked = sorted(frame.rows, key=lambda r: (-r.features[0], r.docno))
            rows.extend(ResultRow(r.qid, r.docno, r.features[0], i, r.features) for i, r in enumerate(ranked))
        return queries, ResultFrame(tuple(rows), names)
    return queries, group_sort(ResultFrame(tuple(rows), names), qid_order=queries.qids)


_HANDLERS = {
    Leaf: _exec_leaf,
    Then: _exec_then,
    Plus: _exec_plus,
    Scalar: _exec_scalar,
    FeatUnion: _exec_featunion,
    SetUnion: _exec_setunion,
    SetIntersect: _exec_setintersect,
    Cutoff: _exec_cutoff,
    Concat: _exec_concat,
    FusedRetrieveTopK: _exec_fused_topk,
    FusedFeatureRetrieve: _exec_fused_features,
}


# functional spellings of the operators
def then(*stages) -> Then:
    return Then(tuple(as_node(s) for s in stages))


def linear_combine(*operands, lenient: bool = False) -> Plus:
    return Plus(tuple(as_node(o) for o in operands), lenient)


def scalar_product(alpha: float, operand) -> Scalar:
    return Scalar(float(alpha), as_node(operand))


def feature_union(*operands) -> FeatUnion:
    return FeatUnion(tuple(as_node(o) for o in operands))


def set_union(*operands) -> SetUnion:
    return SetUnion(tuple(as_node(o) for o in operands))


def set_intersect(*operands) -> SetIntersect:
    return SetIntersect(tuple(as_node(o) for o in operands))


def rank_cutoff(operand, k: int) -> Cutoff:
    return Cutoff(as_node(operand), k)


def concatenate_node(first, second) -> Concat:
    return Concat(as_node(first), as_node(second))
