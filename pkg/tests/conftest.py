from __future__ import annotations

import json
from pathlib import Path

import pytest

from pipert import IndexOptions, QueryFrame, build_index, read_qrels, read_topics

FIXTURES = Path(__file__).parent / "fixtures"


def load_corpus(path: Path) -> list[tuple[str, str]]:
    with open(path, encoding="utf-8") as fh:
        return [(d["docno"], d["text"]) for d in map(json.loads, fh)]


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def small_docs():
    return load_corpus(FIXTURES / "corpus.jsonl")


@pytest.fixture(scope="session")
def small_index(small_docs):
    return build_index(small_docs, name="index")


@pytest.fixture(scope="session")
def small_topics() -> QueryFrame:
    return read_topics(FIXTURES / "topics.tsv")


@pytest.fixture(scope="session")
def small_qrels():
    return read_qrels(FIXTURES / "qrels.txt")


@pytest.fixture
def tiny_index():
    # no stopwords: "a" would otherwise be dropped
    return build_index([("d0", "a b"), ("d1", "b b c")], IndexOptions(stopwords=()), name="tiny")


# ---------------------------------------------------------------------------
# acceptance reporting: one PASS/FAIL line per criterion after the run

_verdicts: dict[int, list] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when != "call" and not report.failed:
        return
    number, title = mark.args
    entry = _verdicts.setdefault(number, [title, True, []])
    entry[1] = entry[1] and report.passed
    entry[2].extend(v for k, v in item.user_properties if k == "detail")


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_verdicts):
        title, ok, details = _verdicts[number]
        note = f" ({'; '.join(details)})" if details else ""
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}{note}")
