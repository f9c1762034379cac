"""trec_eval-compatible effectiveness measures for a single query.

A ranking is an ordered list of docnos; judgments map docno to a graded label.
Relevant means label > 0 and unjudged documents count as non-relevant.
"""

from __future__ import annotations

import math
import re
from typing import Callable, Mapping, Sequence

from .errors import NoJudgments, UnknownMetric


def average_precision(ranking: Sequence[str], qrels: Mapping[str, int]) -> float:
    relevant = sum(1 for label in qrels.values() if label > 0)
    if relevant == 0:
        return 0.0
    hits = 0
    total = 0.0
    for i, docno in enumerate(ranking):
        if qrels.get(docno, 0) > 0:
            hits += 1
            total += hits / (i + 1)
    return total / relevant


def _dcg(gains: Sequence[float]) -> float:
    return sum(g / math.log2(i + 2) for i, g in enumerate(gains))


def ndcg(ranking: Sequence[str], qrels: Mapping[str, int], k: int | None = None) -> float:
    """Linear gain (= label), discount 1/log2(rank + 2) with 0-based rank."""
    gains = [max(qrels.get(d, 0), 0) for d in ranking]
    ideal = sorted((label for label in qrels.values() if label > 0), reverse=True)
    if k is not None:
        gains, ideal = gains[:k], ideal[:k]
    idcg = _dcg(ideal)
    if idcg == 0:
        return 0.0
    return _dcg(gains) / idcg


def precision_at(ranking: Sequence[str], qrels: Mapping[str, int], k: int) -> float:
    return sum(1 for d in ranking[:k] if qrels.get(d, 0) > 0) / k


def reciprocal_rank(ranking: Sequence[str], qrels: Mapping[str, int]) -> float:
    for i, docno in enumerate(ranking):
        if qrels.get(docno, 0) > 0:
            return 1.0 / (i + 1)
    return 0.0


_CUTOFF = re.compile(r"^(ndcg_cut|P)_(\d+)$")


def resolve_metric(name: str) -> Callable[[Sequence[str], Mapping[str, int]], float]:
    """Map a trec_eval measure name (map, ndcg, ndcg_cut_K, P_K, recip_rank) to a function."""
    if name == "map":
        return average_precision
    if name == "ndcg":
        return ndcg
    if name == "recip_rank":
        return reciprocal_rank
    m = _CUTOFF.match(name)
    if m and int(m.group(2)) > 0:
        k = int(m.group(2))
        if m.group(1) == "P":
            return lambda ranking, qrels: precision_at(ranking, qrels, k)
        return lambda ranking, qrels: ndcg(ranking, qrels, k)
    raise UnknownMetric(f"unknown metric {name!r}; expected map, ndcg, ndcg_cut_K, P_K or recip_rank")


def metric(name: str, ranking: Sequence[str], qrels: Mapping[str, int]) -> float:
    if not qrels:
        raise NoJudgments("query has no relevance judgments")
    return resolve_metric(name)(list(ranking), qrels)
