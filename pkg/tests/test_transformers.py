import json
import random

import pytest

from pipert.datamodel import Query, QueryFrame, QrelSet, ResultFrame, ResultRow
from pipert.errors import (
    ContractViolation,
    EmptyTrainingSet,
    FeatureLengthMismatch,
    MissingResults,
    NoTrainableStage,
    NotTrained,
)
from pipert.experiment import evaluate_run
from pipert.index import build_index
from pipert.operators import execute
from pipert.retrieval import BM25, QLDirichlet, TFIDF, feature_retrieve
from pipert.transformers import (
    Expand,
    Extract,
    Generic,
    RerankLinear,
    Retrieve,
    Rewrite,
    fit,
)

import harness

Q = QueryFrame((Query("q1", "cats hunting mice"), Query("q2", "search engine ranking")))


def test_rewrite_tokenizes_and_merges():
    qs, r = Rewrite().transform(QueryFrame((Query("a", "The quick fox"), Query("b", "run running"))), None)
    assert dict(qs[0].terms) == {"quick": 1.0, "fox": 1.0}
    assert dict(qs[1].terms) == {"run": 2.0}
    assert qs[0].text == "The quick fox" and r is None
    again, _ = Rewrite().transform(qs, None)
    assert again == qs


def test_retrieve_full_and_rescore_modes(small_index):
    t = Retrieve(small_index, "BM25", k=3)
    q_out, r = t.transform(Q)
    assert q_out is Q
    assert all(len(rows) <= 3 for rows in r.by_query().values())
    _, rescored = Retrieve(small_index, "QL").transform(Q, r)
    assert rescored.keys() == r.keys()


def test_extract_appends_features(small_index):
    _, r = Retrieve(small_index, "BM25", k=5).transform(Q)
    _, same = Extract(small_index, []).transform(Q, r)
    assert same is r
    _, lengths = Extract(small_index, ["DOCLEN"]).transform(Q, r)
    for row in lengths.rows:
        assert row.features == (float(small_index.doclens[small_index.docno_to_id[row.docno]]),)
    _, two = Extract(small_index, [TFIDF(), QLDirichlet()]).transform(Q, r)
    assert two.feature_names == ("TFIDF", "QL")
    for q in Q:
        fat = {x.docno: x.features for x in feature_retrieve(small_index, q, BM25(), 5, [TFIDF(), QLDirichlet()]).rows}
        for row in two.rows:
            if row.qid == q.qid:
                assert row.features == pytest.approx(fat[row.docno], abs=1e-9)
    _, more = Extract(small_index, ["BM25"]).transform(Q, two)
    assert more.feature_names == ("TFIDF", "QL", "BM25")
    with pytest.raises(MissingResults):
        Extract(small_index, ["BM25"]).transform(Q, None)


def test_expand_needs_results(small_index):
    with pytest.raises(MissingResults):
        Expand(small_index).transform(Q, None)


@pytest.fixture(scope="module")
def prf_index():
    return build_index(harness.PRF_DOCS, name="prf")


def test_prf_retrieves_more_relevant_documents(prf_index):
    queries = QueryFrame((Query("q1", "apple"),))
    qrels = QrelSet.from_dict(harness.PRF_QRELS)
    rewrite, bm25 = Rewrite(prf_index.options), Retrieve(prf_index, "BM25")
    baseline = rewrite >> bm25
    prf = rewrite >> bm25 >> Expand(prf_index, fb_docs=2, fb_terms=4, lam=0.6) >> bm25
    base_map = evaluate_run(execute(baseline, queries)[1], queries, qrels, ["map"])["q1"]["map"]
    prf_run = execute(prf, queries)[1]
    prf_map = evaluate_run(prf_run, queries, qrels, ["map"])["q1"]["map"]
    assert prf_map > base_map
    assert prf_run.keys() != execute(baseline, queries)[1].keys()


def test_prf_with_zero_lambda_matches_original_query(small_index):
    rewrite, bm25 = Rewrite(small_index.options), Retrieve(small_index, "BM25")
    prf = rewrite >> bm25 >> Expand(small_index, lam=0.0) >> bm25
    a = execute(prf, Q)[1]
    b = execute(rewrite >> bm25, Q)[1]
    assert [(r.qid, r.docno, r.rank) for r in a.rows] == [(r.qid, r.docno, r.rank) for r in b.rows]


def test_rerank_linear_projection_and_zero_weights():
    frame = ResultFrame(
        (ResultRow("q", "b", 0.0, None, (1.0, 9.0)), ResultRow("q", "a", 0.0, None, (2.0, 0.0))), ("x", "y")
    )
    queries = QueryFrame((Query("q", "x"),))
    _, out = RerankLinear([1.0, 0.0], ("x", "y")).transform(queries, frame)
    assert [r.docno for r in out.rows] == ["a", "b"]
    _, zeros = RerankLinear([0.0, 0.0], ("x", "y")).transform(queries, frame)
    assert [r.docno for r in zeros.rows] == ["a", "b"] and all(r.score == 0 for r in zeros.rows)
    assert zeros.rows[0].features == (2.0, 0.0)
    with pytest.raises(NotTrained):
        RerankLinear().transform(queries, frame)
    with pytest.raises(FeatureLengthMismatch):
        RerankLinear([1.0]).transform(queries, frame)


def test_rerank_linear_learns_separable_task(tmp_path):
    frame, qrels = harness.ltr_task(random.Random(0))
    model = RerankLinear()
    log = model.train(frame, qrels)
    queries = QueryFrame(tuple(Query(q, "x") for q in qrels.qids()))
    _, ranked = model.transform(queries, frame)
    per_query = evaluate_run(ranked, queries, qrels, ["map"])
    assert sum(v["map"] for v in per_query.values()) / len(per_query) == pytest.approx(1.0)
    assert log.iterations >= 1
    model.save(tmp_path / "w.json")
    assert json.loads((tmp_path / "w.json").read_text())["feature_names"] == ["noise_a", "label", "noise_b"]
    loaded = RerankLinear(source=str(tmp_path / "w.json"))
    assert loaded.weights == model.weights


def test_training_needs_some_relevant_query():
    frame, _ = harness.ltr_task(random.Random(1), 2, 3)
    with pytest.raises(EmptyTrainingSet):
        RerankLinear().train(frame, QrelSet.from_dict({"q0": {"d0_0": 0}}))


def test_fit_through_a_composed_pipeline(small_index, small_topics, small_qrels):
    rewrite = Rewrite(small_index.options)
    ltr = RerankLinear()
    pipe = rewrite >> Retrieve(small_index, "BM25") >> (Retrieve(small_index, "TFIDF") ** Retrieve(small_index, "QL")) >> ltr
    fit(pipe, small_topics, small_qrels)
    assert ltr.trained and ltr.feature_names == ("TFIDF", "QL")
    uniform = RerankLinear([0.5, 0.5], ("TFIDF", "QL"))
    untrained = rewrite >> Retrieve(small_index, "BM25") >> (Retrieve(small_index, "TFIDF") ** Retrieve(small_index, "QL")) >> uniform

    def mean_map(p):
        per = evaluate_run(execute(p, small_topics)[1], small_topics, small_qrels, ["map"])
        return sum(v["map"] for v in per.values()) / len(per)

    assert mean_map(pipe) >= mean_map(untrained) - 1e-12
    with pytest.raises(NoTrainableStage):
        fit(rewrite >> Retrieve(small_index, "BM25"), small_topics, small_qrels)


def test_generic_contract():
    frame = ResultFrame((ResultRow("q1", "d1", 1.0),))
    ident = Generic(lambda q, r: (q, r))
    assert ident.transform(Q, frame) == (Q, frame)
    empty = Generic(lambda q, r: (q, ResultFrame()))
    assert len(empty.transform(Q, frame)[1]) == 0
    dup = Generic(lambda q, r: (q, ResultFrame(r.rows + r.rows)))
    with pytest.raises(ContractViolation):
        dup.transform(Q, frame)
    wrong = Generic(lambda q, r: 42)
    with pytest.raises(ContractViolation):
        wrong.transform(Q, frame)
