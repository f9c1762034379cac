"""pipert: declarative information-retrieval pipelines with an optimizing compiler."""

from .compiler import canonicalize, compile_pipeline, explain, rewrite
from .datamodel import (
    UNDEFINED,
    Qrel,
    QrelSet,
    Query,
    QueryFrame,
    ResultFrame,
    ResultRow,
    read_qrels,
    read_run,
    read_topics,
    write_qrels,
    write_run,
    write_topics,
)
from .dsl import DslProgram, parse_pipeline, parse_program, to_dsl
from .errors import *  # noqa: F401,F403
from .experiment import ExperimentReport, bench_mrt, experiment
from .index import Index, IndexOptions, build_index, read_corpus, read_index, tokenize, write_index
from .metrics import average_precision, metric, ndcg
from .operators import Node, execute
from .retrieval import BM25, TFIDF, DocLength, QLDirichlet, exhaustive_topk, maxscore_topk
from .transformers import Expand, Extract, Generic, RerankLinear, Retrieve, Rewrite, fit

__version__ = "0.1.0"
