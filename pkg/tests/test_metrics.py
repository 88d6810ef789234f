import json
import math
import random
from fractions import Fraction

import pytest
from conftest import snapshot
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import brute_cov, brute_ndcg, brute_recall

from dlcrec import metrics
from dlcrec.data import Item, ItemCatalog
from dlcrec.errors import EmptyInput, UnknownItem
from dlcrec.metrics import EvalInput, ListMetrics, aggregate, evaluate

# Reported (Cov@10, MAE_Cov@10, n_c) for three methods x two datasets x three control numbers.
# Kept as strings so the consistency check is exact; several rows sit on the boundary.
REFERENCE_ROWS = [
    # n_c = 2
    ("2.526", "1.112", 2), ("2.689", "0.827", 2),
    ("2.517", "0.987", 2), ("2.242", "0.486", 2),
    ("2.478", "0.798", 2), ("1.655", "0.445", 2),
    # n_c = 5
    ("2.515", "2.529", 5), ("2.713", "2.291", 5),
    ("2.519", "2.541", 5), ("2.257", "2.745", 5),
    ("4.468", "0.662", 5), ("4.582", "0.434", 5),
    # n_c = 8
    ("2.508", "5.492", 8), ("2.743", "5.257", 8),
    ("2.525", "5.475", 8), ("2.253", "5.747", 8),
    ("7.495", "0.511", 8), ("7.873", "0.131", 8),
]


def coverage_gap_within_mae(cov: str, mae: str, n_c: int) -> bool:
    return abs(Fraction(cov) - n_c) <= Fraction(mae)


def test_reference_rows_are_consistent():
    assert len(REFERENCE_ROWS) == 18
    assert all(coverage_gap_within_mae(*row) for row in REFERENCE_ROWS)
    # 8 - 2.508 = 5.492 exactly: equality, not a float accident
    assert abs(Fraction("2.508") - 8) == Fraction("5.492")


def test_reference_example_gap():
    assert abs(Fraction("4.468") - 5) == Fraction("0.532") <= Fraction("0.662")


def test_inconsistent_row_is_caught():
    assert not coverage_gap_within_mae("4.468", "0.5", 5)


GENRES = "ABCDEFGHIJKL"


@pytest.fixture(scope="module")
def cat():
    return ItemCatalog([Item(str(i), f"T{i}", (GENRES[i % 12],)) for i in range(60)])


def test_recall_examples():
    truth = [str(i) for i in range(10)]
    assert metrics.recall_at_k(truth, truth) == 1.0
    assert metrics.recall_at_k([str(i) for i in range(10, 20)], truth) == 0.0
    assert metrics.recall_at_k(["0", "1", "2"] + [str(i) for i in range(20, 27)], truth) == pytest.approx(0.3)
    assert metrics.recall_at_k(truth, []) == 0.0


def test_ndcg_examples():
    truth = [str(i) for i in range(10)]
    assert metrics.ndcg_at_k(truth[::-1], truth) == 1.0
    assert metrics.ndcg_at_k([str(i) for i in range(10, 20)], truth) == 0.0
    rec = ["x1", "0", "x2", "x3", "1", "x4", "x5", "x6", "x7", "x8"]
    expected = (1 / math.log2(3) + 1 / math.log2(6)) / sum(1 / math.log2(i + 1) for i in range(1, 11))
    assert metrics.ndcg_at_k(rec, truth) == pytest.approx(expected, abs=1e-15)
    assert metrics.ndcg_at_k(rec, truth) == pytest.approx(brute_ndcg(rec, truth), abs=1e-12)
    assert metrics.ndcg_at_k(rec, []) == 0.0


def test_cov_examples(cat):
    by_genre = {g: [i for i in cat.ids() if cat.genre(i) == g] for g in GENRES}
    pools = {g: iter(v) for g, v in by_genre.items()}
    rec = [next(pools[g]) for g in "AABCCCDABE"]
    assert metrics.cov_at_k(rec, cat) == 5
    assert metrics.cov_at_k(by_genre["A"][:5] * 2, cat) == 1
    assert metrics.cov_at_k([by_genre[g][0] for g in GENRES[:10]], cat) == 10
    with pytest.raises(UnknownItem):
        metrics.cov_at_k(["nope"], cat)


def test_mae_cov():
    assert metrics.mae_cov_at_k([2, 3, 2], 2) == pytest.approx(1 / 3)
    assert metrics.mae_cov_at_k([4, 4], 4) == 0
    assert metrics.mae_cov_at_k([1, 5], [2, 5]) == 0.5
    with pytest.raises(EmptyInput):
        metrics.mae_cov_at_k([], 2)
    with pytest.raises(ValueError):
        metrics.mae_cov_at_k([1, 2], [1])


def test_metrics_match_brute_force(cat):
    rng = random.Random(7)
    ids = cat.ids()
    genre_of = {i: cat.genre(i) for i in ids}
    for _ in range(1000):
        rec = [rng.choice(ids) for _ in range(10)]
        truth = rng.sample(ids, rng.choice([10, 10, 10, 3, 1]))
        assert metrics.recall_at_k(rec, truth) == brute_recall(rec, truth)
        assert metrics.cov_at_k(rec, cat) == brute_cov(rec, genre_of)
        assert abs(metrics.ndcg_at_k(rec, truth) - brute_ndcg(rec, truth)) <= 1e-12


@settings(max_examples=300, deadline=None)
@given(st.permutations(list(range(20))), st.integers(0, 9), st.integers(1, 9))
def test_moving_a_hit_earlier_never_hurts(perm, src, shift):
    truth = [str(i) for i in range(10)]
    rec = [str(i) for i in perm[:10]]
    if rec[src] not in truth:
        return
    dst = max(0, src - shift)
    moved = rec[:]
    moved.insert(dst, moved.pop(src))
    assert metrics.ndcg_at_k(moved, truth) >= metrics.ndcg_at_k(rec, truth) - 1e-15


@settings(max_examples=200, deadline=None)
@given(st.permutations([str(i) for i in range(10)]), st.randoms(use_true_random=False))
def test_recall_and_cov_order_invariant(rec, rnd):
    cat = ItemCatalog([Item(str(i), f"T{i}", (GENRES[i % 4],)) for i in range(20)])
    truth = [str(i) for i in range(5, 15)]
    shuffled = rec[:]
    rnd.shuffle(shuffled)
    assert metrics.recall_at_k(rec, truth) == metrics.recall_at_k(shuffled, truth)
    assert metrics.cov_at_k(rec, cat) == metrics.cov_at_k(shuffled, cat)


# -- aggregation ---------------------------------------------------------------


def test_single_input_report_equals_its_metrics(cat):
    rec = cat.ids()[:10]
    m = evaluate(EvalInput(rec, cat.ids()[5:15], 3), cat)
    report = aggregate([m])
    assert (report.ndcg_at_10, report.recall_at_10, report.cov_at_10) == (m.ndcg, m.recall, m.cov)
    assert report.mae_cov_at_10 == abs(m.cov - 3) and report.n == 1


def test_aggregate_means_and_groups():
    lists = [ListMetrics(2, 0.5, 0.4, 2), ListMetrics(2, 0.1, 0.2, 4), ListMetrics(5, 0.3, 0.3, 5)]
    r = aggregate(lists, "X")
    assert r.ndcg_at_10 == pytest.approx(0.3) and r.recall_at_10 == pytest.approx(0.3)
    assert r.cov_at_10 == pytest.approx(11 / 3)
    assert r.mae_cov_at_10 == pytest.approx(2 / 3)
    assert r.per_nc[2]["mae_cov_at_10"] == 1.0 and r.per_nc[5]["cov_at_10"] == 5
    # the mean-of-errors differs from the error-of-means here
    assert abs(r.per_nc[2]["cov_at_10"] - 2) == 1.0


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 10), st.integers(1, 10)), min_size=1, max_size=40))
def test_coverage_gap_never_exceeds_mae(pairs):
    report = aggregate([ListMetrics(nc, 0.0, 0.0, cov) for nc, cov in pairs])
    assert report.coverage_consistent()


def test_report_schema():
    r = aggregate([ListMetrics(2, 0.5, 0.4, 3), ListMetrics(3, 0.1, 0.2, 3)], "DLCREC")
    d = json.loads(r.to_json())
    assert set(d) == set(metrics.METRICS) | {"per_list", "method", "metadata"}
    assert d["cov_at_10"] == {"mean": 3.0, "n": 2, "per_nc": {"2": 3.0, "3": 3.0}}
    assert d["per_list"][0] == {"n_c": 2, "ndcg": 0.5, "recall": 0.4, "cov": 3}
    assert "recall_denominator" in d["metadata"]


def test_table_layout_snapshot():
    reports = {
        "BIGREC_DIV": aggregate([ListMetrics(2, 0.049, 0.0428, 3), ListMetrics(5, 0.0481, 0.0426, 2)], "BIGREC_DIV"),
        "DLCREC": aggregate([ListMetrics(2, 0.0357, 0.0306, 2), ListMetrics(5, 0.045, 0.0405, 4)], "DLCREC"),
    }
    text = metrics.render_table(reports)
    assert text == snapshot("table.txt", text)
    header = text.splitlines()[0]
    assert header.split("|")[1].split() == ["NDCG@10", "Recall@10", "Cov@10", "MAE_Cov@10"]
    assert "control number=2" in text and "control number=5" in text
