import math
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ratemill.boster import BoostParams, Tree, TreeEnsembleModel, fit, predict_margin
from ratemill.explainer import (
    dependence_data, expected_margin, shap_values, summary_stats, tree_shap, waterfall_data,
)
from ratemill.matrix import FeatureMatrix


def conditional(tree, x, present, node=0):
    """E[tree(x) | features in ``present`` fixed], absent splits averaged by cover."""
    f = tree.feature[node]
    if f == -1:
        return tree.value[node]
    l, r = tree.left[node], tree.right[node]
    if f in present:
        v = x[f]
        go_left = tree.missing_left[node] if np.isnan(v) else v <= tree.threshold[node]
        return conditional(tree, x, present, l if go_left else r)
    c = tree.cover[node]
    return (tree.cover[l] / c * conditional(tree, x, present, l)
            + tree.cover[r] / c * conditional(tree, x, present, r))


def brute_shapley(model, x):
    P = len(model.feature_names)
    cache = {}

    def v(S):
        if S not in cache:
            cache[S] = model.base_score + sum(conditional(t, x, S) for t in model.trees)
        return cache[S]

    phi = np.zeros(P)
    for i in range(P):
        others = [j for j in range(P) if j != i]
        for size in range(P):
            w = math.factorial(size) * math.factorial(P - size - 1) / math.factorial(P)
            for S in combinations(others, size):
                S = frozenset(S)
                phi[i] += w * (v(S | {i}) - v(S))
    return phi, v(frozenset())


def random_ensemble(seed):
    rng = np.random.default_rng(seed)
    P = int(rng.integers(2, 11))
    n = 400
    X = rng.normal(size=(n, P))
    X[rng.random(X.shape) < 0.1] = np.nan
    z = np.nan_to_num(X) @ rng.normal(size=P)
    y = (rng.random(n) < 1 / (1 + np.exp(-z))).astype(int)
    params = BoostParams(n_rounds=int(rng.integers(1, 6)), num_leaves=int(rng.integers(2, 12)),
                         max_depth=int(rng.integers(1, 5)), min_child_samples=5, learning_rate=0.3)
    model = fit(FeatureMatrix([f"f{i}" for i in range(P)], X, y), params, seed=seed)
    return model, X


def test_brute_force_agreement_fifty_ensembles():
    worst = 0.0
    for seed in range(50):
        model, X = random_ensemble(seed)
        assert max(t.max_depth() for t in model.trees) <= 4
        rows = X[:3]
        phi, base = shap_values(model, rows)
        for r, row in enumerate(rows):
            oracle, oracle_base = brute_shapley(model, row)
            worst = max(worst, np.abs(phi[r] - oracle).max(), abs(base - oracle_base))
    assert worst < 1e-9


def test_additivity_thousand_rows():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(3000, 6))
    X[rng.random(X.shape) < 0.05] = np.nan
    y = (rng.random(3000) < 1 / (1 + np.exp(-np.nan_to_num(X[:, 0] - X[:, 1] * X[:, 2])))).astype(int)
    model = fit(FeatureMatrix([f"f{i}" for i in range(6)], X, y), BoostParams(n_rounds=60, num_leaves=20))
    rows = X[:1000]
    phi, base = shap_values(model, rows)
    assert np.abs(base + phi.sum(axis=1) - predict_margin(model, rows)).max() < 1e-9


def test_empty_ensemble():
    model = TreeEnsembleModel([], -1.3, 0.1, ["a", "b"])
    exp = tree_shap(model, [1.0, 2.0])
    assert exp.base_value == -1.3 and (exp.contributions == 0).all()


def test_stump_closed_form():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(500, 3))
    y = (X[:, 1] > 0.2).astype(int)
    model = fit(FeatureMatrix(["a", "b", "c"], X, y), BoostParams(n_rounds=1, num_leaves=2, min_child_samples=1))
    t = model.trees[0]
    assert t.feature[0] == 1
    expect = (t.cover[t.left[0]] * t.value[t.left[0]] + t.cover[t.right[0]] * t.value[t.right[0]]) / t.cover[0]
    for row in X[:5]:
        leaf = t.left[0] if row[1] <= t.threshold[0] else t.right[0]
        exp = tree_shap(model, row)
        assert exp.contributions[1] == pytest.approx(t.value[leaf] - expect, abs=1e-12)
        assert exp.contributions[0] == 0 and exp.contributions[2] == 0


def test_symmetry_hand_built():
    # root on f0, both children on f1, value depends only on how many of f0, f1 exceed 0.5
    tree = Tree(
        feature=[0, 1, 1, -1, -1, -1, -1], threshold=[0.5, 0.5, 0.5, 0, 0, 0, 0],
        missing_left=[True] * 7, left=[1, 3, 5, -1, -1, -1, -1], right=[2, 4, 6, -1, -1, -1, -1],
        value=[0, 0, 0, 0.0, 1.0, 1.0, 3.0], cover=[100, 50, 50, 25, 25, 25, 25])
    model = TreeEnsembleModel([tree], 0.0, 1.0, ["x0", "x1", "x2"])
    for row in ([1.0, 1.0, 0.0], [0.0, 0.0, 9.0]):
        phi = tree_shap(model, row).contributions
        assert phi[0] == pytest.approx(phi[1], abs=1e-12)
        assert phi[2] == 0
        oracle, _ = brute_shapley(model, np.array(row))
        np.testing.assert_allclose(phi, oracle, atol=1e-12)


def fitted():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(800, 7))
    X[:, 6] = 2.0  # constant, never split on
    y = (rng.random(800) < 1 / (1 + np.exp(-(X[:, 0] + X[:, 1])))).astype(int)
    names = ["a", "b", "e0", "e1", "e2", "e3", "flat"]
    return fit(FeatureMatrix(names, X, y), BoostParams(n_rounds=20, num_leaves=6)), X


def test_summary_stats():
    model, X = fitted()
    rows = np.vstack([X[:50], X[:1]])
    phi, ranking = summary_stats(model, rows)
    np.testing.assert_array_equal(phi[0], phi[-1])
    imp = dict(zip(ranking["feature"], ranking["mean_abs_shap"]))
    assert imp["flat"] == 0.0
    _, shuffled = summary_stats(model, rows[::-1])
    assert shuffled["feature"].tolist() == ranking["feature"].tolist()


def test_dependence():
    model, X = fitted()
    d = dependence_data(model, X[:40], "flat", "b")
    assert len(d) == 40 and (d["shap"] == 0).all()
    np.testing.assert_array_equal(d["color"], X[:40, 1])
    with pytest.raises(ValueError):
        dependence_data(model, X[:3], "nope", "b")


def test_waterfall_and_groups():
    model, X = fitted()
    row = X[5]
    exp = tree_shap(model, row)
    groups = {f"e{i}": "embedding" for i in range(4)}
    grouped = exp.grouped(groups)
    assert grouped["embedding"] == sum(float(exp.contributions[2 + i]) for i in range(4))
    for top_n in (1, 2, 3, 10):
        w = waterfall_data(model, row, top_n)
        total = w["base_value"] + sum(e["value"] for e in w["entries"])
        assert total == pytest.approx(w["margin"], abs=1e-9)
        assert any(e["feature"] == "other" for e in w["entries"]) == (top_n < 7)
        values = [abs(e["value"]) for e in w["entries"] if e["feature"] != "other"]
        assert values == sorted(values, reverse=True)


def test_single_feature_waterfall():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(300, 1))
    model = fit(FeatureMatrix(["x"], x, (x[:, 0] > 0).astype(int)), BoostParams(n_rounds=3))
    w = waterfall_data(model, x[0], top_n=1)
    assert len(w["entries"]) == 1
    assert w["entries"][0]["value"] == pytest.approx(w["margin"] - w["base_value"], abs=1e-12)


def test_feature_mismatch():
    model, X = fitted()
    with pytest.raises(ValueError, match="feature mismatch"):
        tree_shap(model, X[0, :3])


@settings(max_examples=25)
@given(st.integers(0, 10_000))
def test_additivity_property(seed):
    model, X = random_ensemble(seed)
    phi, base = shap_values(model, X[:20])
    np.testing.assert_allclose(base + phi.sum(axis=1), predict_margin(model, X[:20]), atol=1e-9, rtol=0)
    assert base == pytest.approx(expected_margin(model), abs=0)
