"""Side-by-side evaluation of pipelines and response-time benchmarking."""

from __future__ import annotations

import csv
import io
import os
import time
from dataclasses import dataclass, field
from typing import Sequence

from .compiler import compile_pipeline
from .datamodel import QrelSet, QueryFrame, ResultFrame, group_sort
from .errors import PipertError, ThreadingError
from .metrics import resolve_metric
from .operators import as_node, execute
from .retrieval import RetrievalStats, collect_stats

THREADS_ENV = "PIPERT_THREADS"


@dataclass
class ExperimentReport:
    names: list[str]
    metrics: list[str]
    means: list[list[float]]
    per_query: dict[str, dict[str, dict[str, float]]]
    evaluated: list[str]
    excluded: list[str]
    mrt_ms: list[float] | None = None

    @property
    def rows(self) -> list[tuple[str, dict[str, float]]]:
        return [(n, dict(zip(self.metrics, vals))) for n, vals in zip(self.names, self.means)]

    def value(self, name: str, metric: str) -> float:
        return self.means[self.names.index(name)][self.metrics.index(metric)]

    def to_table(self) -> str:
        headers = ["name", *self.metrics] + (["mrt_ms"] if self.mrt_ms is not None else [])
        body = []
        for i, name in enumerate(self.names):
            cells = [name] + [f"{v:.4f}" for v in self.means[i]]
            if self.mrt_ms is not None:
                cells.append(f"{self.mrt_ms[i]:.3f}")
            body.append(cells)
        widths = [max(len(r[c]) for r in [headers, *body]) for c in range(len(headers))]
        lines = []
        for r in [headers, *body]:
            first = r[0].ljust(widths[0])
            rest = [cell.rjust(w) for cell, w in zip(r[1:], widths[1:])]
            lines.append("  ".join([first, *rest]).rstrip())
        lines.append(f"queries evaluated: {len(self.evaluated)}; excluded without judgments: {len(self.excluded)}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["name", *self.metrics] + (["mrt_ms"] if self.mrt_ms is not None else []))
        for i, name in enumerate(self.names):
            row = [name] + [f"{v:.6f}" for v in self.means[i]]
            if self.mrt_ms is not None:
                row.append(f"{self.mrt_ms[i]:.3f}")
            writer.writerow(row)
        return buf.getvalue()


def rankings(frame: ResultFrame | None) -> dict[str, list[str]]:
    """Docnos per query in rank order."""
    if frame is None:
        return {}
    if any(r.rank is None for r in frame.rows):
        frame = group_sort(frame)
    out: dict[str, list[str]] = {}
    for qid, rows in frame.by_query().items():
        out[qid] = [r.docno for r in sorted(rows, key=lambda r: r.rank)]
    return out


def evaluate_run(frame: ResultFrame | None, queries: QueryFrame, qrels: QrelSet, metrics: Sequence[str]):
    """Per-query metric values for queries that have judgments."""
    fns = {m: resolve_metric(m) for m in metrics}
    ranked = rankings(frame)
    per_query = {}
    for qid in queries.qids:
        judged = qrels.for_query(qid)
        if not judged:
            continue
        ranking = ranked.get(qid, [])
        per_query[qid] = {m: fn(ranking, judged) for m, fn in fns.items()}
    return per_query


def experiment(
    pipelines: Sequence,
    names: Sequence[str] | None,
    queries: QueryFrame,
    qrels: QrelSet,
    metrics: Sequence[str] = ("map", "ndcg"),
    optimize: bool = True,
    timing: bool = False,
) -> ExperimentReport:
    """Run every pipeline on the same queries and tabulate mean metrics.

    Queries without any judgments are left out of the means and reported.
    """
    if names is None:
        names = [f"pipeline{i}" for i in range(len(pipelines))]
    if len(names) != len(pipelines):
        raise ValueError(f"{len(pipelines)} pipelines but {len(names)} names")
    for m in metrics:
        resolve_metric(m)
    evaluated = [q for q in queries.qids if qrels.for_query(q)]
    excluded = [q for q in queries.qids if not qrels.for_query(q)]

    means, per_query, mrt = [], {}, []
    for name, pipe in zip(names, pipelines):
        node = as_node(pipe)
        if optimize:
            node = compile_pipeline(node)
        started = time.perf_counter()
        try:
            _, results = execute(node, queries)
        except PipertError as err:
            err.push_stage(f"pipeline {name}")
            raise
        elapsed = time.perf_counter() - started
        mrt.append(1000 * elapsed / max(len(queries), 1))
        values = evaluate_run(results, queries, qrels, metrics)
        per_query[name] = values
        means.append([sum(values[q][m] for q in evaluated) / len(evaluated) if evaluated else 0.0 for m in metrics])
    return ExperimentReport(list(names), list(metrics), means, per_query, evaluated, excluded, mrt if timing else None)


@dataclass
class BenchResult:
    mrt_ms: float
    per_query_ms: list[float]
    stats: RetrievalStats = field(default_factory=RetrievalStats)


def _check_single_thread() -> None:
    value = os.environ.get(THREADS_ENV)
    if value is not None and value.strip() != "1":
        raise ThreadingError(f"{THREADS_ENV}={value!r}; benchmarks run on a single thread (set it to 1 or unset it)")


def bench_mrt(pipeline, queries: QueryFrame, warmup: int = 3, repetitions: int = 1) -> BenchResult:
    """Mean response time per query in milliseconds.

    Each query runs alone through ``execute`` on this thread; the first
    ``warmup`` queries are executed but not measured. Pass an already
    compiled pipeline to time the optimized plan.
    """
    _check_single_thread()
    if warmup < 0 or repetitions < 1:
        raise ValueError("warmup must be >= 0 and repetitions >= 1")
    if len(queries) <= warmup:
        raise ValueError(f"need more than {warmup} queries to measure after warm-up")
    node = as_node(pipeline)
    for q in queries.queries[:warmup]:
        execute(node, QueryFrame((q,)))
    per_query = []
    with collect_stats() as stats:
        for q in queries.queries[warmup:]:
            single = QueryFrame((q,))
            total = 0.0
            for _ in range(repetitions):
                start = time.perf_counter()
                execute(node, single)
                total += time.perf_counter() - start
            per_query.append(1000 * total / repetitions)
    return BenchResult(sum(per_query) / len(per_query), per_query, stats)
