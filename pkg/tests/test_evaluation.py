"""Metric closed forms, ranking against a brute-force oracle, harness wiring."""

import json
import math

import numpy as np
import pytest

from c2emb.errors import (
    ContractError,
    DataFormatError,
    NumericDegeneracyError,
    ShapeError,
)
from c2emb.evaluation import (
    EvalTask,
    evaluate,
    load_task,
    mrr_at_k,
    ndcg_at_k,
    rank,
    recall_at_k,
)


# ── Metrics ─────────────────────────────────────────────────────────────────

class TestMetrics:
    def test_perfect_single_relevant(self):
        assert ndcg_at_k(["a", "b"], {"a"}, 10) == 1.0
        assert mrr_at_k(["a", "b"], {"a"}, 10) == 1.0
        assert recall_at_k(["a", "b"], {"a"}, 10) == 1.0

    def test_relevant_at_rank_three(self):
        ranked = ["x", "y", "a", "z"]
        assert abs(ndcg_at_k(ranked, {"a"}, 10) - 0.5) < 1e-15  # 1/log2(4)
        assert abs(mrr_at_k(ranked, {"a"}, 10) - 1 / 3) < 1e-15
        assert recall_at_k(ranked, {"a"}, 10) == 1.0

    def test_two_relevant_hand_computed(self):
        ranked = ["a", "x", "b", "y"]
        dcg = 1.0 + 1.0 / math.log2(4)
        idcg = 1.0 + 1.0 / math.log2(3)
        assert abs(ndcg_at_k(ranked, {"a", "b"}, 10) - dcg / idcg) < 1e-15

    def test_k_truncates(self):
        ranked = ["x", "y", "z", "a"]
        assert ndcg_at_k(ranked, {"a"}, 3) == 0.0
        assert mrr_at_k(ranked, {"a"}, 3) == 0.0
        assert recall_at_k(ranked, {"a"}, 3) == 0.0

    def test_ideal_dcg_capped_by_k(self):
        # 3 relevant docs but only 2 slots: filling both is a perfect score
        assert ndcg_at_k(["a", "b"], {"a", "b", "c"}, 2) == 1.0

    def test_partial_recall(self):
        assert recall_at_k(["a", "x"], {"a", "b"}, 2) == 0.5

    def test_validation(self):
        with pytest.raises(ContractError):
            ndcg_at_k(["a"], {"a"}, 0)
        with pytest.raises(ContractError):
            mrr_at_k(["a"], set(), 5)


# ── Ranking ─────────────────────────────────────────────────────────────────

class TestRank:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        q = rng.normal(size=4)
        docs = rng.normal(size=(7, 4))
        ids = [f"d{j}" for j in range(7)]
        cos = [float(docs[j] @ q / (np.linalg.norm(docs[j]) * np.linalg.norm(q)))
               for j in range(7)]
        want = [i for _, i in sorted(zip([-c for c in cos], ids))]
        assert rank(q, docs, ids, 7) == want
        assert rank(q, docs, ids, 3) == want[:3]

    def test_tie_breaks_on_ascending_id(self):
        q = np.array([1.0, 0.0])
        docs = np.array([[2.0, 0.0], [3.0, 0.0]])  # equal cosine after normalizing
        assert rank(q, docs, ["b", "a"], 2) == ["a", "b"]

    def test_scale_invariant(self):
        rng = np.random.default_rng(3)
        q = rng.normal(size=3)
        docs = rng.normal(size=(5, 3))
        ids = list("abcde")
        assert rank(q, docs, ids, 5) == rank(q * 7.0, docs * 0.01, ids, 5)

    def test_errors(self):
        with pytest.raises(NumericDegeneracyError):
            rank(np.zeros(2), np.ones((1, 2)), ["a"], 1)
        with pytest.raises(ShapeError):
            rank(np.ones(2), np.ones((2, 2)), ["a"], 1)
        with pytest.raises(ShapeError):
            rank(np.ones(3), np.ones((1, 2)), ["a"], 1)
        with pytest.raises(ContractError):
            rank(np.ones(2), np.ones((1, 2)), ["a"], 0)


# ── Task container and files ────────────────────────────────────────────────

def write_task(root, name="toy", queries=None, corpus=None, qrels=None):
    d = root / name
    d.mkdir()
    queries = queries if queries is not None else {"q1": "alpha", "q2": "beta"}
    corpus = corpus if corpus is not None else {"d1": "one", "d2": "two"}
    qrels = qrels if qrels is not None else [("q1", "d1"), ("q2", "d2")]
    with open(d / "queries.jsonl", "w") as fh:
        for i, t in queries.items():
            fh.write(json.dumps({"id": i, "text": t}) + "\n")
    with open(d / "corpus.jsonl", "w") as fh:
        for i, t in corpus.items():
            fh.write(json.dumps({"id": i, "text": t}) + "\n")
    with open(d / "qrels.tsv", "w") as fh:
        for qid, did in qrels:
            fh.write(f"{qid}\t{did}\n")
    return d


class TestEvalTask:
    def test_query_without_relevant_doc(self):
        with pytest.raises(DataFormatError, match="q2"):
            EvalTask("t", {"q1": "a", "q2": "b"}, {"d": "x"},
                     {"q1": frozenset({"d"})})

    def test_qrels_unknown_query(self):
        with pytest.raises(DataFormatError, match="ghost"):
            EvalTask("t", {"q1": "a"}, {"d": "x"},
                     {"q1": frozenset({"d"}), "ghost": frozenset({"d"})})

    def test_qrels_unknown_document(self):
        with pytest.raises(DataFormatError, match="missing-doc"):
            EvalTask("t", {"q1": "a"}, {"d": "x"},
                     {"q1": frozenset({"d", "missing-doc"})})

    def test_empty_parts_rejected(self):
        with pytest.raises(DataFormatError):
            EvalTask("t", {}, {"d": "x"}, {})
        with pytest.raises(DataFormatError):
            EvalTask("t", {"q": "a"}, {}, {"q": frozenset({"d"})})


class TestLoadTask:
    def test_round_trip(self, tmp_path):
        d = write_task(tmp_path, name="mytask")
        task = load_task(d)
        assert task.name == "mytask"
        assert task.queries == {"q1": "alpha", "q2": "beta"}
        assert task.corpus == {"d1": "one", "d2": "two"}
        assert task.qrels == {"q1": frozenset({"d1"}), "q2": frozenset({"d2"})}

    def test_missing_dir(self, tmp_path):
        with pytest.raises(DataFormatError):
            load_task(tmp_path / "nope")

    def test_bad_json_names_line(self, tmp_path):
        d = write_task(tmp_path)
        with open(d / "queries.jsonl", "a") as fh:
            fh.write("{broken\n")
        with pytest.raises(DataFormatError, match=r"queries\.jsonl:3"):
            load_task(d)

    def test_duplicate_id(self, tmp_path):
        d = write_task(tmp_path, corpus={"d1": "one", "d2": "two"})
        with open(d / "corpus.jsonl", "a") as fh:
            fh.write(json.dumps({"id": "d1", "text": "again"}) + "\n")
        with pytest.raises(DataFormatError, match="duplicate"):
            load_task(d)

    def test_malformed_qrels_line(self, tmp_path):
        d = write_task(tmp_path)
        with open(d / "qrels.tsv", "a") as fh:
            fh.write("only-one-field\n")
        with pytest.raises(DataFormatError, match=r"qrels\.tsv:3"):
            load_task(d)

    def test_qrels_doc_must_exist(self, tmp_path):
        d = write_task(tmp_path, qrels=[("q1", "d1"), ("q2", "elsewhere")])
        with pytest.raises(DataFormatError, match="elsewhere"):
            load_task(d)


# ── Harness ─────────────────────────────────────────────────────────────────

VECS = {
    "alpha": [1.0, 0.0], "beta": [0.0, 1.0],
    "one": [1.0, 0.0], "two": [0.0, 1.0], "three": [0.6, 0.8],
}


def make_toy_task():
    return EvalTask(
        name="toy",
        queries={"q1": "alpha", "q2": "beta"},
        corpus={"d1": "one", "d2": "two", "d3": "three"},
        qrels={"q1": frozenset({"d1"}), "q2": frozenset({"d1"})},
    )


class TestEvaluate:
    def embed(self, texts, task, side):
        return np.array([VECS[t] for t in texts])

    def test_hand_computed_report(self):
        # q1 ranks [d1, d3, d2] with d1 relevant; q2 ranks [d2, d3, d1]
        report = evaluate(self.embed, [make_toy_task()], k=10)
        toy = report["tasks"]["toy"]
        assert toy["n_queries"] == 2
        assert abs(toy["ndcg"] - (1.0 + 0.5) / 2) < 1e-15
        assert abs(toy["mrr"] - (1.0 + 1 / 3) / 2) < 1e-15
        assert toy["recall"] == 1.0
        assert report["average"] == {"ndcg": toy["ndcg"], "mrr": toy["mrr"],
                                     "recall": toy["recall"]}
        assert report["k"] == 10

    def test_k_two_drops_late_hit(self):
        report = evaluate(self.embed, [make_toy_task()], k=2)
        toy = report["tasks"]["toy"]
        assert toy["ndcg"] == 0.5 and toy["mrr"] == 0.5 and toy["recall"] == 0.5

    def test_sides_and_order_of_embed_calls(self):
        calls = []

        def spy(texts, task, side):
            calls.append((task, side, tuple(texts)))
            return self.embed(texts, task, side)

        evaluate(spy, [make_toy_task()], k=3)
        assert calls == [("toy", "doc", ("one", "two", "three")),
                         ("toy", "query", ("alpha", "beta"))]

    def test_deterministic(self):
        a = evaluate(self.embed, [make_toy_task()], k=5)
        b = evaluate(self.embed, [make_toy_task()], k=5)
        assert a == b

    def test_embedding_scale_does_not_matter(self):
        scaled = lambda texts, task, side: 17.0 * self.embed(texts, task, side)
        assert evaluate(self.embed, [make_toy_task()]) == \
            evaluate(scaled, [make_toy_task()])

    def test_macro_average_over_tasks(self):
        t1 = make_toy_task()
        t2 = EvalTask("other", {"q": "alpha"}, {"d1": "one", "d2": "two"},
                      {"q": frozenset({"d1"})})
        report = evaluate(self.embed, [t1, t2], k=10)
        want = (report["tasks"]["toy"]["ndcg"] + report["tasks"]["other"]["ndcg"]) / 2
        assert abs(report["average"]["ndcg"] - want) < 1e-15

    def test_duplicate_task_names_rejected(self):
        with pytest.raises(ContractError, match="duplicate"):
            evaluate(self.embed, [make_toy_task(), make_toy_task()])

    def test_no_tasks_rejected(self):
        with pytest.raises(ContractError):
            evaluate(self.embed, [])

    def test_row_count_mismatch(self):
        bad = lambda texts, task, side: np.ones((1, 2))
        with pytest.raises(ShapeError):
            evaluate(bad, [make_toy_task()])
