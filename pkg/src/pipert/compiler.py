"""Pipeline rewriting: canonical form, backend fusions and plan rendering.

Rules are structural patterns over the canonical (flattened) tree. A pattern
may contain variables, guarded variables and sequence variables that absorb
any run of siblings in an n-ary node, which is enough to find a fusable pair
anywhere inside a long ``>>`` chain. Rules apply innermost-first, in list
order, until nothing changes.

Whether a subtree receives a ranking as input matters: ``Retrieve`` rescales
incoming candidates instead of searching the index, and the fused backend
operations only replace full retrievals. Rules therefore see a context saying
whether their node may receive results.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

from .errors import RuleNonTermination
from .operators import (
    Concat,
    Cutoff,
    FeatUnion,
    FusedFeatureRetrieve,
    FusedRetrieveTopK,
    Leaf,
    Node,
    Plus,
    Scalar,
    SetIntersect,
    SetUnion,
    Then,
    as_node,
)
from .transformers import RerankLinear, Retrieve

MAX_ITERATIONS = 100

# ---------------------------------------------------------------------------
# patterns


@dataclass(frozen=True)
class Var:
    """Matches any value (optionally passing ``test``); repeated names must agree."""

    name: str
    test: Callable[[object], bool] | None = None


@dataclass(frozen=True)
class SeqVar:
    """Matches zero or more consecutive children of an n-ary node."""

    name: str


class Pat:
    """Matches a node of exactly ``kind`` whose attributes match the given sub-patterns."""

    def __init__(self, kind: type, **fields) -> None:
        self.kind = kind
        self.fields = fields

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}={v!r}" for k, v in self.fields.items())
        return f"Pat({self.kind.__name__}, {inner})"


def match(pattern, subject, bindings: dict | None = None) -> Iterator[dict]:
    """Yield every binding environment under which ``pattern`` matches ``subject``."""
    bindings = {} if bindings is None else bindings
    if isinstance(pattern, Var):
        if pattern.test is not None and not pattern.test(subject):
            return
        if pattern.name in bindings:
            if bindings[pattern.name] == subject:
                yield bindings
            return
        yield {**bindings, pattern.name: subject}
    elif isinstance(pattern, Pat):
        if type(subject) is not pattern.kind:
            return
        yield from _match_fields(list(pattern.fields.items()), subject, bindings)
    elif isinstance(pattern, tuple):
        if isinstance(subject, tuple):
            yield from _match_seq(list(pattern), list(subject), bindings)
    elif pattern == subject:
        yield bindings


def _match_fields(fields, subject, bindings) -> Iterator[dict]:
    if not fields:
        yield bindings
        return
    (name, sub), rest = fields[0], fields[1:]
    for b in match(sub, getattr(subject, name), bindings):
        yield from _match_fields(rest, subject, b)


def _match_seq(patterns: list, items: list, bindings: dict) -> Iterator[dict]:
    if not patterns:
        if not items:
            yield bindings
        return
    head, rest = patterns[0], patterns[1:]
    if isinstance(head, SeqVar):
        for cut in range(len(items) + 1):
            chunk = tuple(items[:cut])
            if head.name in bindings and bindings[head.name] != chunk:
                continue
            yield from _match_seq(rest, items[cut:], {**bindings, head.name: chunk})
        return
    if not items:
        return
    for b in match(head, items[0], bindings):
        yield from _match_seq(rest, items[1:], b)


# ---------------------------------------------------------------------------
# static shape analysis


def may_output_results(node: Node, may_have_input: bool) -> bool:
    """Conservatively, can ``node`` emit a ranking given whether its input may carry one?"""
    if isinstance(node, Leaf):
        out = node.transformer.output_results(may_have_input) if hasattr(node.transformer, "output_results") else None
        return True if out is None else bool(out)
    if isinstance(node, Then):
        may = may_have_input
        for child in node.children:
            may = may_output_results(child, may)
        return may
    return True


@dataclass(frozen=True)
class Context:
    may_have_results: bool = False


def _child_contexts(node: Node, ctx: Context) -> list[Context]:
    if isinstance(node, Then):
        out, may = [], ctx.may_have_results
        for child in node.children:
            out.append(Context(may))
            may = may_output_results(child, may)
        return out
    return [ctx] * len(node.children_nodes())


# ---------------------------------------------------------------------------
# rules


@dataclass(frozen=True)
class RewriteRule:
    name: str
    pattern: object
    build: Callable[[dict], Node]
    guard: Callable[[dict, Context], bool] | None = None

    def apply(self, node: Node, ctx: Context) -> Node | None:
        for b in match(self.pattern, node):
            if self.guard is None or self.guard(b, ctx):
                return self.build(b)
        return None


def _is_retrieve(t) -> bool:
    return isinstance(t, Retrieve)


def _always_ranked(node: Node) -> bool:
    """Output is always group-sorted with defined scores and assigned ranks."""
    if isinstance(node, Leaf):
        return isinstance(node.transformer, (Retrieve, RerankLinear))
    if isinstance(node, Then):
        return _always_ranked(node.children[-1])
    return isinstance(node, (Plus, Scalar, FeatUnion, Cutoff, Concat, FusedRetrieveTopK, FusedFeatureRetrieve))


def structural_key(node: Node) -> str:
    return explain(node)


def _unsorted_commutative(node) -> bool:
    if not isinstance(node, (Plus, SetUnion, SetIntersect)):
        return False
    keys = [structural_key(c) for c in node.children]
    return keys != sorted(keys)


SCALAR_FOLD = RewriteRule(
    "scalar_fold",
    Pat(Scalar, alpha=Var("a"), child=Pat(Scalar, alpha=Var("b"), child=Var("t"))),
    lambda b: Scalar(b["a"] * b["b"], b["t"]),
)

SCALAR_IDENTITY = RewriteRule(
    "scalar_identity",
    Pat(Scalar, alpha=1.0, child=Var("t", _always_ranked)),
    lambda b: b["t"],
)

CUTOFF_FOLD = RewriteRule(
    "cutoff_fold",
    Pat(Cutoff, child=Pat(Cutoff, child=Var("t"), k=Var("k1")), k=Var("k2")),
    lambda b: Cutoff(b["t"], min(b["k1"], b["k2"])),
)

COMMUTATIVE_ORDER = RewriteRule(
    "commutative_order",
    Var("n", _unsorted_commutative),
    lambda b: b["n"].with_children(tuple(sorted(b["n"].children, key=structural_key))),
)

CUTOFF_PUSHDOWN = RewriteRule(
    "cutoff_pushdown",
    Pat(Cutoff, child=Pat(Leaf, transformer=Var("r", _is_retrieve)), k=Var("k")),
    lambda b: FusedRetrieveTopK(b["r"].index, b["r"].model, b["k"]),
    guard=lambda b, ctx: b["k"] <= b["r"].k and not ctx.may_have_results,
)


def _first_stage(node) -> tuple | None:
    """(index, model, k) of a stage that retrieves top-k from the index, else None."""
    if isinstance(node, Leaf) and isinstance(node.transformer, Retrieve):
        t = node.transformer
        return t.index, t.model, t.k
    if isinstance(node, FusedRetrieveTopK):
        return node.index, node.model, node.k
    return None


def _fusion_guard(b: dict, ctx: Context) -> bool:
    may = ctx.may_have_results
    for node in b["pre"]:
        may = may_output_results(node, may)
    if may:
        return False
    index, _, _ = _first_stage(b["first"])
    models = []
    for node in b["feats"]:
        if not (isinstance(node, Leaf) and isinstance(node.transformer, Retrieve)):
            return False
        if node.transformer.index is not index:
            return False
        models.append(node.transformer.model.name)
    return len(set(models)) == len(models)


def _fusion_build(b: dict) -> Node:
    index, model, k = _first_stage(b["first"])
    fused = FusedFeatureRetrieve(index, model, k, tuple(n.transformer.model for n in b["feats"]))
    stages = b["pre"] + (fused,) + b["post"]
    return stages[0] if len(stages) == 1 else Then(stages)


FEATURE_FUSION = RewriteRule(
    "feature_fusion",
    Pat(
        Then,
        children=(
            SeqVar("pre"),
            Var("first", lambda n: _first_stage(n) is not None),
            Pat(FeatUnion, children=(SeqVar("feats"),)),
            SeqVar("post"),
        ),
    ),
    _fusion_build,
    guard=_fusion_guard,
)

CANONICAL_RULES = (SCALAR_FOLD, SCALAR_IDENTITY, CUTOFF_FOLD, COMMUTATIVE_ORDER)
NATIVE_RULES = (CUTOFF_PUSHDOWN, FEATURE_FUSION)
RULESETS = {"canonical": CANONICAL_RULES, "native": NATIVE_RULES}
DEFAULT_RULES = CANONICAL_RULES + NATIVE_RULES


# ---------------------------------------------------------------------------
# driver


@dataclass
class RewriteTrace:
    fired: list[str]


def _rewrite_pass(node: Node, rules: Sequence[RewriteRule], ctx: Context, trace: list[str]) -> Node:
    children = node.children_nodes()
    if children:
        new_children = tuple(
            _rewrite_pass(c, rules, cctx, trace) for c, cctx in zip(children, _child_contexts(node, ctx))
        )
        if any(a is not b for a, b in zip(children, new_children)):
            node = node.with_children(new_children)
    for rule in rules:
        out = rule.apply(node, ctx)
        if out is not None and out != node:
            trace.append(rule.name)
            return out
    return node


def rewrite(node, rules: Sequence[RewriteRule], has_results: bool = False, trace: list[str] | None = None) -> Node:
    """Apply ``rules`` innermost-first until a fixpoint."""
    node = as_node(node)
    trace = [] if trace is None else trace
    ctx = Context(has_results)
    for _ in range(MAX_ITERATIONS):
        new = _rewrite_pass(node, rules, ctx, trace)
        if new == node:
            return new
        node = new
    raise RuleNonTermination(f"no fixpoint after {MAX_ITERATIONS} passes; rules fired: {trace[-10:]}")


def canonicalize(node) -> Node:
    """Flattened, scalar-folded, commutative children in structural order."""
    return rewrite(node, CANONICAL_RULES, has_results=True)


def compile_pipeline(
    node,
    rules: Sequence[RewriteRule] | None = None,
    has_results: bool = False,
    trace: list[str] | None = None,
) -> Node:
    """Canonicalize then fuse for the native backend. Output executes identically."""
    return rewrite(node, DEFAULT_RULES if rules is None else rules, has_results, trace)


# ---------------------------------------------------------------------------
# plan rendering


def _fmt_num(x: float) -> str:
    return repr(float(x))


def node_line(node: Node) -> str:
    if isinstance(node, Leaf):
        t = node.transformer
        return t.describe() if hasattr(t, "describe") else repr(t)
    if isinstance(node, Scalar):
        return f"Scalar[alpha={_fmt_num(node.alpha)}]"
    if isinstance(node, Cutoff):
        return f"Cutoff[k={node.k}]"
    if isinstance(node, Plus):
        return "Plus[lenient]" if node.lenient else "Plus"
    if isinstance(node, FusedRetrieveTopK):
        return f"FusedRetrieveTopK[{node.model.name},k={node.k}]"
    if isinstance(node, FusedFeatureRetrieve):
        feats = ",".join(m.name for m in node.feature_models)
        return f"FusedFeatureRetrieve[{node.model.name},k={node.k},features={feats}]"
    return node.kind


def explain(node, indent: int = 0) -> str:
    """Deterministic indented plan, one node per line."""
    node = as_node(node)
    lines = ["  " * indent + node_line(node)]
    for child in node.children_nodes():
        lines.append(explain(child, indent + 1))
    return "\n".join(lines)
