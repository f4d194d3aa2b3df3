import json

import numpy as np
import pytest
from conftest import small_model_config
from hypothesis import given, settings
from hypothesis import strategies as st

from mvhan.evaluation import (
    EvalReport,
    MetricError,
    auc,
    evaluate,
    hr_at_k,
    read_report,
    rela_impr,
    write_report,
)
from mvhan.model import build_variant
from mvhan.retrieval import EmbeddingIndex
from mvhan.training import TrainConfig, train


def pair_count_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def test_auc_extremes():
    assert auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0
    assert auc([0.1, 0.2, 0.9, 0.8], [1, 1, 0, 0]) == 0.0
    assert auc([0.5, 0.5], [1, 0]) == 0.5


def test_auc_single_class_is_error():
    with pytest.raises(MetricError):
        auc([0.1, 0.2], [1, 1])
    with pytest.raises(MetricError):
        auc([0.1, 0.2], [0, 0])


def test_auc_matches_pair_counting_on_200_points():
    rng = np.random.default_rng(0)
    s = rng.normal(size=200)
    y = rng.integers(0, 2, size=200)
    assert auc(s, y) == pair_count_auc(s.tolist(), y.tolist())


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 500), st.integers(0, 2**31), st.sampled_from([3, 20, None]))
def test_auc_matches_pair_counting_with_ties(n, seed, levels):
    rng = np.random.default_rng(seed)
    s = rng.integers(0, levels, size=n).astype(float) if levels else rng.normal(size=n)
    y = rng.integers(0, 2, size=n)
    y[0], y[1] = 0, 1
    assert auc(s, y) == pair_count_auc(s.tolist(), y.tolist())


MAIN_RESULTS = [
    # (value, baseline, kind, expected %)
    (0.7076, 0.6988, "auc", 4.43),
    (0.2952, 0.2821, "hr", 4.64),
    (0.7269, 0.7232, "auc", 1.66),
    (0.1718, 0.1653, "hr", 3.93),
    (0.7076, 0.6075, "auc", 93.12),   # against the weakest baseline
    (0.2952, 0.1383, "hr", 113.45),
]

MVHAN = {"sc": (0.7076, 0.2952), "novels": (0.7269, 0.1718)}
ABLATIONS = {
    "wose": ({"sc": (0.7061, 0.2915), "novels": (0.7260, 0.1697)}, (0.73, 1.27, 0.40, 1.24)),
    "wofe": ({"sc": (0.7049, 0.2909), "novels": (0.7229, 0.1656)}, (1.32, 1.48, 1.79, 3.74)),
    "mlp": ({"sc": (0.7035, 0.2898), "novels": (0.7245, 0.1683)}, (2.01, 1.86, 1.07, 2.08)),
}


@pytest.mark.parametrize("value,baseline,kind,expected", MAIN_RESULTS)
def test_rela_impr_main_results(value, baseline, kind, expected):
    assert abs(round(rela_impr(value, baseline, kind), 2) - expected) <= 0.01 + 1e-9


@pytest.mark.parametrize("row", sorted(ABLATIONS))
def test_rela_impr_ablation_rows(row):
    values, expected = ABLATIONS[row]
    got = []
    for ds in ("sc", "novels"):
        got.append(rela_impr(MVHAN[ds][0], values[ds][0], "auc"))
        got.append(rela_impr(MVHAN[ds][1], values[ds][1], "hr"))
    for g, e in zip(got, expected):
        assert abs(round(g, 2) - e) <= 0.01 + 1e-9


def test_rela_impr_edge_cases():
    assert rela_impr(0.7, 0.7, "auc") == 0.0
    assert rela_impr(0.3, 0.3, "hr") == 0.0
    with pytest.raises(MetricError):
        rela_impr(0.7, 0.5, "auc")
    with pytest.raises(MetricError):
        rela_impr(0.2, 0.0, "hr")
    with pytest.raises(MetricError):
        rela_impr(0.2, 0.1, "ndcg")


def _three_item_index():
    # scores for the user below: id 10 -> 1.0, id 20 -> 0.8, id 30 -> -1.0
    vecs = np.array([[1.0, 0.0], [0.8, 0.6], [-1.0, 0.0]])
    return EmbeddingIndex.from_vectors("target", np.array([10, 20, 30]), vecs), np.array([[1.0, 0.0]])


def test_hr_hand_built_case():
    index, users = _three_item_index()
    pairs = [(0, 20)]
    assert hr_at_k(index, users, pairs, 1) == 0.0
    assert hr_at_k(index, users, pairs, 2) == 1.0
    # excluding the user's training positive id 10 promotes id 20 to the top
    assert hr_at_k(index, users, pairs, 1, exclude={0: np.array([0])}) == 1.0


def test_hr_k_at_least_catalog_is_one():
    rng = np.random.default_rng(1)
    index = EmbeddingIndex.from_vectors("source", np.arange(30), rng.normal(size=(30, 5)))
    users = rng.normal(size=(8, 5))
    pairs = np.column_stack([rng.integers(0, 8, size=40), rng.integers(0, 30, size=40)])
    assert hr_at_k(index, users, pairs, 30) == 1.0
    assert hr_at_k(index, users, pairs, 100) == 1.0
    hrs = [hr_at_k(index, users, pairs, k) for k in range(1, 31)]
    assert all(a <= b for a, b in zip(hrs, hrs[1:]))


def test_hr_errors():
    index, users = _three_item_index()
    with pytest.raises(MetricError):
        hr_at_k(index, users, [], 1)
    with pytest.raises(MetricError):
        hr_at_k(index, users, [(0, 20)], 0)


@pytest.fixture(scope="module")
def trained(tiny_data):
    ds, tr, te, _ = tiny_data
    model = build_variant(small_model_config(), tr.schema, 0)
    train(model, tr, TrainConfig(epochs=3, r=5, batch_size=64, lr=5e-3))
    return model, tr, te


def test_evaluate_report_in_range_and_deterministic(trained, tmp_path):
    model, tr, te = trained
    a = evaluate(model, tr, te, k=10, seed=3)
    b = evaluate(model, tr, te, k=10, seed=3)
    assert a.to_text() == b.to_text()
    for t in ("source", "target"):
        assert 0 <= a.auc[t] <= 1 and 0 <= a.hr[t] <= 1
        assert a.n_pairs[t] >= a.n_users[t] >= 1
    write_report(a, tmp_path / "r.json")
    back = read_report(tmp_path / "r.json")
    assert back.to_text() == a.to_text()


def test_report_with_baseline(trained):
    model, tr, te = trained
    base = EvalReport(k=10, name="ttm", auc={"target": 0.6}, hr={"target": 0.1},
                      n_users={"target": 1}, n_pairs={"target": 1})
    rep = evaluate(model, tr, te, k=10, baseline=base)
    assert rep.baseline == "ttm"
    assert set(rep.rela_impr) == {"target"}
    assert rep.rela_impr["target"]["hr@10"] == round(rela_impr(rep.hr["target"], 0.1, "hr"), 2)
    d = rep.to_dict()
    assert d["types"]["target"]["hr@10"] == rep.hr["target"]
    keys = list(json.loads(rep.to_text()))
    assert keys == sorted(keys)
