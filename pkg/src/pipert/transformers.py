"""Transformers: the composable (queries, results) -> (queries, results) units.

Concrete classes cover basic retrieval and rescoring, query rewriting, RM3
expansion, feature extraction, a trainable linear re-ranker, and arbitrary
Python functions. Any transformer combines with the pipeline operators.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .datamodel import QueryFrame, Query, QrelSet, ResultFrame, ResultRow, group_sort
from .errors import (
    ContractViolation,
    EmptyFeedback,
    EmptyTrainingSet,
    FeatureLengthMismatch,
    FeatureNameCollision,
    MissingResults,
    NoTrainableStage,
    NotTrained,
)
from .index import Index, IndexOptions, tokenize
from .metrics import average_precision, resolve_metric
from .operators import Composable, Leaf, Node, Then, as_node, execute
from .retrieval import BM25, DocLength, QLDirichlet, TFIDF, exhaustive_topk, parse_model, rescore, rm3_expand

log = logging.getLogger(__name__)


class Transformer(Composable):
    """Base class. Subclasses implement :meth:`transform` and :meth:`describe`."""

    name = "transformer"
    trainable = False

    def transform(self, queries: QueryFrame, results: ResultFrame | None = None):
        raise NotImplementedError

    def describe(self) -> str:
        return f"{type(self).__name__}()"

    def output_results(self, has_results: bool) -> bool | None:
        """Whether the output carries results given whether the input does; None if unknown."""
        return None

    def search(self, queries: QueryFrame) -> ResultFrame | None:
        return self.transform(queries)[1]

    def fit(self, train_queries, train_qrels, valid_queries=None, valid_qrels=None):
        return fit_pipeline(Leaf(self), train_queries, train_qrels, valid_queries, valid_qrels)

    def _key(self) -> tuple:
        return (id(self),)

    def __eq__(self, other) -> bool:
        return type(self) is type(other) and self._key() == other._key()

    def __hash__(self) -> int:
        return hash((type(self).__name__, self._key()))

    def __repr__(self) -> str:
        return self.describe()


def _results_for(results: ResultFrame, qid: str) -> ResultFrame:
    return ResultFrame(tuple(r for r in results.rows if r.qid == qid), results.feature_names)


class Retrieve(Transformer):
    """Top-k retrieval, or rescoring of the incoming candidates when results are given."""

    def __init__(self, index: Index, model="BM25", k: int = 1000) -> None:
        if isinstance(model, str):
            model = parse_model(model)
        if not isinstance(model, (BM25, TFIDF, QLDirichlet)):
            raise ValueError(f"Retrieve needs a weighting model, got {model!r}")
        if not isinstance(k, int) or k < 1:
            raise ValueError(f"k must be a positive integer, got {k!r}")
        self.index = index
        self.model = model
        self.k = k

    @property
    def name(self) -> str:
        return self.model.name

    def _key(self):
        return (id(self.index), self.model, self.k)

    def describe(self) -> str:
        return f"retrieve({self.index.name}, {self.model.name}, k={self.k})"

    def output_results(self, has_results: bool) -> bool:
        return True

    def transform(self, queries, results=None):
        rows: list[ResultRow] = []
        if results is None:
            for q in queries:
                rows.extend(exhaustive_topk(self.index, q, self.model, self.k).rows)
        else:
            for q in queries:
                rows.extend(rescore(self.index, q, self.model, results).rows)
        return queries, ResultFrame(tuple(rows))


class Rewrite(Transformer):
    """Tokenizes query text into weighted terms (weight 1 per occurrence)."""

    name = "rewrite"

    def __init__(self, options: IndexOptions | None = None) -> None:
        self.options = options or IndexOptions()

    def _key(self):
        return (self.options,)

    def describe(self) -> str:
        return "rewrite()"

    def output_results(self, has_results: bool) -> bool:
        return has_results

    def transform(self, queries, results=None):
        out = []
        for q in queries:
            if q.terms:
                out.append(q)
                continue
            weights: dict[str, float] = {}
            for tok in tokenize(q.text, self.options):
                weights[tok] = weights.get(tok, 0.0) + 1.0
            out.append(Query(q.qid, q.text, tuple(weights.items())) if weights else q)
        return QueryFrame(tuple(out)), results


class Expand(Transformer):
    """RM3 pseudo-relevance feedback: Q x R -> Q'.

    The ranking is consumed, so a following ``Retrieve`` runs the
    reformulated queries against the whole index.
    """

    name = "expand"

    def __init__(self, index: Index, fb_docs: int = 3, fb_terms: int = 10, lam: float = 0.6) -> None:
        self.index = index
        self.fb_docs = fb_docs
        self.fb_terms = fb_terms
        self.lam = lam

    def _key(self):
        return (id(self.index), self.fb_docs, self.fb_terms, self.lam)

    def describe(self) -> str:
        return f"expand({self.index.name}, fb_docs={self.fb_docs}, fb_terms={self.fb_terms}, lambda={self.lam!r})"

    def output_results(self, has_results: bool) -> bool:
        return False

    def transform(self, queries, results=None):
        if results is None:
            raise MissingResults("expand needs a ranking to draw feedback documents from")
        out = []
        for q in queries:
            try:
                out.append(rm3_expand(self.index, q, results, self.fb_docs, self.fb_terms, self.lam))
            except EmptyFeedback:
                # nothing retrieved for this query; leave it as it was
                out.append(q)
        return QueryFrame(tuple(out)), None


class Extract(Transformer):
    """Appends one feature column per model, computed by rescoring the candidates."""

    name = "extract"

    def __init__(self, index: Index, models: Sequence = ()) -> None:
        self.index = index
        self.models = tuple(parse_model(m) if isinstance(m, str) else m for m in models)

    def _key(self):
        return (id(self.index), self.models)

    def describe(self) -> str:
        return f"extract({self.index.name}, [{', '.join(m.name for m in self.models)}])"

    def output_results(self, has_results: bool) -> bool:
        return True

    def transform(self, queries, results=None):
        if results is None:
            raise MissingResults("extract needs candidate results")
        if not self.models:
            return queries, results
        names = results.feature_names + tuple(m.name for m in self.models)
        if len(set(names)) != len(names):
            raise FeatureNameCollision(f"extract would duplicate feature names: {names}")
        columns: list[dict[tuple[str, str], float]] = []
        for model in self.models:
            col = {}
            for q in queries:
                for r in rescore(self.index, q, model, results).rows:
                    col[(r.qid, r.docno)] = r.score
            columns.append(col)
        rows = []
        for r in results.rows:
            key = (r.qid, r.docno)
            old = r.features if r.features is not None else ()
            if results.feature_names and r.features is None:
                raise ContractViolation(f"row {key} lacks features its frame declares")
            rows.append(replace(r, features=tuple(old) + tuple(c[key] for c in columns)))
        return queries, ResultFrame(tuple(rows), names)


# ---------------------------------------------------------------------------
# learned re-ranking

COORDINATE_GRID = tuple(sorted({s * 2.0**i for i in range(-3, 4) for s in (1, -1)} | {0.0}))


@dataclass
class TrainingLog:
    iterations: int = 0
    best_validation: float = float("nan")
    skipped_queries: int = 0
    history: list[float] = field(default_factory=list)


class _RankingTask:
    """Per-query feature matrices and labels, prepared once for fast metric evaluation."""

    def __init__(self, frame: ResultFrame, qrels: QrelSet, metric: str) -> None:
        self.metric_fn = resolve_metric(metric)
        self.groups = []
        self.skipped = 0
        for qid, rows in frame.by_query().items():
            judged = qrels.for_query(qid)
            if not any(label > 0 for label in judged.values()):
                self.skipped += 1
                continue
            rows = sorted(rows, key=lambda r: r.docno)
            feats = np.array([r.features for r in rows], dtype=float)
            self.groups.append((feats, [r.docno for r in rows], judged))

    def evaluate(self, weights: np.ndarray) -> float:
        if not self.groups:
            return 0.0
        total = 0.0
        for feats, docnos, judged in self.groups:
            scores = feats @ weights
            # stable sort over docno-sorted rows gives the docno tie-break
            order = np.argsort(-scores, kind="stable")
            total += self.metric_fn([docnos[i] for i in order], judged)
        return total / len(self.groups)


class RerankLinear(Transformer):
    """Linear scorer over row features, trained by coordinate ascent on a ranking metric."""

    name = "rerank_linear"
    trainable = True

    def __init__(
        self,
        weights: Sequence[float] | None = None,
        feature_names: Sequence[str] | None = None,
        source: str | None = None,
        metric: str = "map",
        max_sweeps: int = 25,
        patience: int = 3,
        base_dir: str | Path | None = None,
    ) -> None:
        self.weights = None if weights is None else [float(w) for w in weights]
        self.feature_names = None if feature_names is None else tuple(feature_names)
        self.source = source
        self.metric = metric
        self.max_sweeps = max_sweeps
        self.patience = patience
        self.log = TrainingLog()
        if source is not None and weights is None:
            path = Path(source)
            self.load(path if base_dir is None or path.is_absolute() else Path(base_dir) / path)

    @property
    def trained(self) -> bool:
        return self.weights is not None

    def _key(self):
        weights = None if self.weights is None else tuple(self.weights)
        return (self.source, weights, self.feature_names, self.metric, self.max_sweeps, self.patience)

    def describe(self) -> str:
        return f'rerank_linear("{self.source}")' if self.source else "rerank_linear()"

    def output_results(self, has_results: bool) -> bool:
        return True

    def transform(self, queries, results=None):
        if not self.trained:
            raise NotTrained("rerank_linear has not been trained")
        if results is None:
            raise MissingResults("rerank_linear needs candidate results with features")
        if len(results) and not results.has_features:
            raise FeatureLengthMismatch("rerank_linear input rows carry no features")
        if results.has_features and len(results.feature_names) != len(self.weights):
            raise FeatureLengthMismatch(
                f"model has {len(self.weights)} weights, input has {len(results.feature_names)} features"
            )
        w = self.weights
        rows = tuple(replace(r, score=sum(wi * fi for wi, fi in zip(w, r.features))) for r in results.rows)
        return queries, group_sort(ResultFrame(rows, results.feature_names), qid_order=queries.qids)

    def train(self, train: ResultFrame, train_qrels: QrelSet, valid: ResultFrame | None = None, valid_qrels: QrelSet | None = None) -> TrainingLog:
        """Deterministic coordinate ascent; keeps the weights with the best validation metric."""
        if not train.has_features:
            raise FeatureLengthMismatch("training rows carry no features")
        n = len(train.feature_names)
        task = _RankingTask(train, train_qrels, self.metric)
        if not task.groups:
            raise EmptyTrainingSet("no training query has a relevant document among its candidates")
        if task.skipped:
            log.warning("skipped %d training queries without relevant candidates", task.skipped)
        vtask = task if valid is None else _RankingTask(valid, valid_qrels, self.metric)

        w = np.full(n, 1.0 / n)
        current = task.evaluate(w)
        best_w, best_valid = w.copy(), vtask.evaluate(w)
        history = [best_valid]
        stale = 0
        sweeps = 0
        for sweeps in range(1, self.max_sweeps + 1):
            changed = False
            for j in range(n):
                if w[j] == 0:
                    options = COORDINATE_GRID
                else:
                    options = tuple(w[j] * g for g in COORDINATE_GRID)
                best_value, best_metric = w[j], current
                for value in options:
                    if value == w[j]:
                        continue
                    trial = w.copy()
                    trial[j] = value
                    m = task.evaluate(trial)
                    if m > best_metric:
                        best_value, best_metric = value, m
                if best_value != w[j]:
                    w[j] = best_value
                    current = best_metric
                    changed = True
            v = vtask.evaluate(w)
            history.append(v)
            if v > best_valid:
                best_w, best_valid, stale = w.copy(), v, 0
            else:
                stale += 1
            if not changed or stale >= self.patience:
                break
        self.weights = [float(x) for x in best_w]
        self.feature_names = tuple(train.feature_names)
        self.log = TrainingLog(sweeps, best_valid, task.skipped, history)
        return self.log

    def save(self, path: str | Path) -> None:
        if not self.trained:
            raise NotTrained("nothing to save; rerank_linear has not been trained")
        payload = {"feature_names": list(self.feature_names or ()), "weights": self.weights}
        Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")

    def load(self, path: str | Path) -> None:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        names, weights = data["feature_names"], data["weights"]
        if len(names) != len(weights):
            raise FeatureLengthMismatch(f"{path}: {len(names)} feature names but {len(weights)} weights")
        self.feature_names = tuple(names)
        self.weights = [float(x) for x in weights]


class Generic(Transformer):
    """Wraps ``fn(queries, results) -> (queries, results)``; outputs are contract-checked."""

    def __init__(self, fn: Callable, name: str | None = None) -> None:
        self.fn = fn
        self.name = name or getattr(fn, "__name__", "generic")

    def _key(self):
        return (id(self.fn),)

    def describe(self) -> str:
        return f"generic({self.name})"

    def transform(self, queries, results=None):
        out = self.fn(queries, results)
        if isinstance(out, ResultFrame):
            q_out, r_out = queries, out
        elif isinstance(out, QueryFrame):
            q_out, r_out = out, results
        elif isinstance(out, tuple) and len(out) == 2:
            q_out, r_out = out
        else:
            raise ContractViolation(f"{self.name} returned {type(out).__name__}, expected (queries, results)")
        if not isinstance(q_out, QueryFrame) or (r_out is not None and not isinstance(r_out, ResultFrame)):
            raise ContractViolation(f"{self.name} returned wrong frame types")
        if set(q_out.qids) != set(queries.qids):
            raise ContractViolation(f"{self.name} changed the set of query ids")
        return q_out, r_out


# ---------------------------------------------------------------------------
# fitting composed pipelines


def has_trainable(node) -> bool:
    node = as_node(node)
    if isinstance(node, Leaf):
        return bool(getattr(node.transformer, "trainable", False))
    return any(has_trainable(c) for c in node.children_nodes())


def fit_pipeline(node, train_queries, train_qrels, valid_queries=None, valid_qrels=None):
    """Train every trainable stage, materialising each stage's inputs through upstream stages."""
    node = as_node(node)
    if not has_trainable(node):
        raise NoTrainableStage("pipeline has no trainable stage")
    if len(train_queries) == 0:
        raise EmptyTrainingSet("no training queries")
    if valid_queries is None:
        valid_queries, valid_qrels = train_queries, train_qrels
    _fit(node, train_queries, None, train_qrels, valid_queries, None, valid_qrels)
    return node


def _fit(node, qt, rt, qrels_t, qv, rv, qrels_v) -> None:
    if isinstance(node, Leaf):
        t = node.transformer
        if not t.trainable:
            return
        if rt is None:
            raise MissingResults(f"{t.name} needs upstream results to train on")
        t.train(rt, qrels_t, rv, qrels_v)
        return
    if isinstance(node, Then):
        last = len(node.children) - 1
        for i, child in enumerate(node.children):
            if has_trainable(child):
                _fit(child, qt, rt, qrels_t, qv, rv, qrels_v)
            if i < last:
                qt, rt = execute(child, qt, rt)
                qv, rv = execute(child, qv, rv)
        return
    for child in node.children_nodes():
        if has_trainable(child):
            _fit(child, qt, rt, qrels_t, qv, rv, qrels_v)


def fit(pipeline, train_queries, train_qrels, valid_queries=None, valid_qrels=None):
    return fit_pipeline(pipeline, train_queries, train_qrels, valid_queries, valid_qrels)
