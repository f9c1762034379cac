"""Command-line entry point: ``pipert index|run|experiment|optimize|bench``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .compiler import compile_pipeline, explain
from .datamodel import read_qrels, read_topics, write_run
from .dsl import BASE_DIR_KEY, parse_program
from .errors import PipertError
from .experiment import bench_mrt, experiment
from .index import Index, IndexOptions, build_index, read_corpus, read_index, write_index
from .operators import Cutoff, execute


def _index_env(specs: list[str] | None) -> dict[str, Index]:
    """``--index DIR`` binds the name ``index``; ``--index NAME=DIR`` binds NAME."""
    env: dict[str, Index] = {}
    for spec in specs or []:
        name, sep, path = spec.partition("=")
        if not sep:
            name, path = "index", spec
        env[name] = read_index(path, name=name)
    return env


def _load_program(path: str, env: dict):
    return parse_program(Path(path).read_text(encoding="utf-8"), {**env, BASE_DIR_KEY: str(Path(path).parent)})


class _Placeholder(Index):
    """Stands in for an index when a program is only compiled, never executed."""

    def __init__(self, name: str) -> None:  # noqa: D401 - deliberately skips Index.__init__
        self.name = name
        self.options = IndexOptions()


def _placeholder_env(src: str) -> dict:
    import re

    names = set(re.findall(r"\b(?:retrieve|expand|extract)\s*\(\s*([A-Za-z_][A-Za-z0-9_]*)", src))
    return {n: _Placeholder(n) for n in names}


def cmd_index(args) -> int:
    opts = IndexOptions(stem=not args.no_stem, build_direct=not args.no_direct)
    index = build_index(read_corpus(args.corpus), opts, name=Path(args.out).name)
    write_index(index, args.out)
    print(f"N={index.num_docs} terms={len(index.terms)} tokens={index.total_tokens}")
    return 0


def cmd_run(args) -> int:
    env = _index_env(args.index)
    node = _load_program(args.pipeline, env).main
    if args.k is not None:
        node = Cutoff(node, args.k)
    if not args.no_optimize:
        node = compile_pipeline(node)
    queries = read_topics(args.topics)
    _, results = execute(node, queries)
    if results is None:
        raise PipertError("pipeline produced no results")
    write_run(results, args.out, tag=args.tag)
    return 0


def cmd_experiment(args) -> int:
    env = _index_env(args.index)
    program = _load_program(args.pipelines, env)
    pipes = program.pipelines()
    if not pipes:
        raise PipertError(f"{args.pipelines} binds no pipelines")
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    report = experiment(
        [p for _, p in pipes],
        [n for n, _ in pipes],
        read_topics(args.topics),
        read_qrels(args.qrels),
        metrics,
        optimize=not args.no_optimize,
    )
    sys.stdout.write(report.to_table())
    if args.csv:
        Path(args.csv).write_text(report.to_csv(), encoding="utf-8")
    return 0


def cmd_optimize(args) -> int:
    src = Path(args.pipeline).read_text(encoding="utf-8")
    env = _index_env(args.index) if args.index else _placeholder_env(src)
    env[BASE_DIR_KEY] = str(Path(args.pipeline).parent)
    node = parse_program(src, env).main
    trace: list[str] = []
    compiled = compile_pipeline(node, trace=trace)
    print("before:")
    print(explain(node, 1))
    print("after:")
    print(explain(compiled, 1))
    print("rules fired: " + (", ".join(trace) if trace else "none"))
    return 0


def cmd_bench(args) -> int:
    env = _index_env(args.index)
    node = _load_program(args.pipeline, env).main
    if not args.no_optimize:
        node = compile_pipeline(node)
    res = bench_mrt(node, read_topics(args.topics), warmup=args.warmup)
    s = res.stats
    print(f"queries measured: {len(res.per_query_ms)}")
    print(f"MRT: {res.mrt_ms:.3f} ms")
    print(f"postings total: {s.postings_total}")
    print(f"postings scored: {s.postings_scored}")
    print(f"postings skipped: {s.postings_skipped}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pipert", description="Declarative IR pipelines.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("index", help="build an index from a JSON-lines corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-stem", action="store_true")
    p.add_argument("--no-direct", action="store_true")
    p.set_defaults(func=cmd_index)

    index_help = "index directory, optionally NAME=DIR (default name: index); repeatable"

    p = sub.add_parser("run", help="execute a pipeline and write a TREC run")
    p.add_argument("--index", action="append", required=True, help=index_help)
    p.add_argument("--topics", required=True)
    p.add_argument("--pipeline", required=True)
    p.add_argument("--k", type=int, help="truncate each query's ranking to k rows")
    p.add_argument("--no-optimize", action="store_true")
    p.add_argument("--tag", default="pipert")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("experiment", help="evaluate every pipeline bound in a program")
    p.add_argument("--index", action="append", required=True, help=index_help)
    p.add_argument("--topics", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--pipelines", required=True)
    p.add_argument("--metrics", default="map,ndcg")
    p.add_argument("--no-optimize", action="store_true")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("optimize", help="show the plan before and after compilation")
    p.add_argument("--pipeline", required=True)
    p.add_argument("--index", action="append", help=index_help)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("bench", help="mean response time of a pipeline")
    p.add_argument("--index", action="append", required=True, help=index_help)
    p.add_argument("--topics", required=True)
    p.add_argument("--pipeline", required=True)
    p.add_argument("--no-optimize", action="store_true")
    p.add_argument("--warmup", type=int, default=3)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "k", None) is not None and args.k < 1:
        parser.error("--k must be a positive integer")
    try:
        return args.func(args)
    except (PipertError, OSError, ValueError) as err:
        print(f"pipert {args.command}: error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
