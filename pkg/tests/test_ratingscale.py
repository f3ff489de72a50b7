import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import binom

from ratemill.ratingscale import (
    BinningObjective, DEParams, InfeasibleScaleError, RatingScale, binomial_test, de_bin, scale_failures,
    traffic_light, validate_scale, validation_frame,
)

GRID = np.round(np.arange(1, 1000) * 1e-3, 3)


def lattice_pds(seed, n=300):
    """PDs on a 0.01 lattice so every partition of the sorted sample is reachable from the 1e-3 grid."""
    rng = np.random.default_rng(seed)
    return np.round(np.clip(rng.beta(1.0, 6.0, n), 0.01, 0.99), 2)


def grid_optimum(pds, k, min_share):
    """Exhaustive search over grid boundaries with an independent SSE computation."""
    p = np.sort(pds)
    n = len(p)
    s1, s2 = np.r_[0, np.cumsum(p)], np.r_[0, np.cumsum(p * p)]
    cuts = np.unique(np.searchsorted(p, GRID, side="left"))

    def sse(lo, hi):
        cnt = hi - lo
        s = s1[hi] - s1[lo]
        return s2[hi] - s2[lo] - s * s / np.maximum(cnt, 1)

    need = min_share * n
    ok = lambda lo, hi: (hi - lo >= need) & (hi - lo > 0)
    if k == 2:
        c = cuts
        total = np.where(ok(0, c) & ok(c, n), sse(0, c) + sse(c, n), np.inf)
        return float(total.min())
    a, b = np.meshgrid(cuts, cuts, indexing="ij")
    valid = (a < b) & ok(0, a) & ok(a, b) & ok(b, n)
    total = np.where(valid, sse(0, a) + sse(a, b) + sse(b, n), np.inf)
    return float(total.min())


class TestDeBin:
    @pytest.mark.parametrize("k", [2, 3])
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_grid_search(self, k, seed):
        pds = lattice_pds(seed)
        scale = de_bin(pds, k=k, seed=seed)
        assert abs(scale.objective - grid_optimum(pds, k, 0.005)) < 1e-9
        assert BinningObjective(pds, k, 0.005, 1.0).violations(scale.boundaries) == 0

    def test_two_point_masses(self):
        pds = np.r_[np.full(150, 0.02), np.full(150, 0.40)]
        scale = de_bin(pds, k=2, seed=0)
        assert 0.02 < scale.boundaries[0] < 0.40
        assert scale.objective == pytest.approx(0.0, abs=1e-12)
        assert scale.class_pd == pytest.approx([0.02, 0.40])

    def test_distinct_values_give_zero(self):
        pds = np.repeat([0.01, 0.05, 0.1, 0.3], 50)
        scale = de_bin(pds, k=4, seed=3)
        assert scale.objective == pytest.approx(0.0, abs=1e-12)

    def test_history_never_increases(self):
        scale = de_bin(lattice_pds(4), k=4, seed=4, de_params=DEParams(polish=False, max_generations=60))
        tail = scale.meta["history_tail"]
        assert all(b <= a for a, b in zip(tail, tail[1:]))

    def test_full_history_monotone(self):
        from ratemill.ratingscale import differential_evolution
        obj = BinningObjective(lattice_pds(5), 3, 0.005, 1e6)
        _, _, history = differential_evolution(obj, 2, np.random.default_rng(0), DEParams(max_generations=80))
        assert all(b <= a for a, b in zip(history, history[1:]))

    def test_infeasible(self):
        with pytest.raises(InfeasibleScaleError):
            de_bin([0.1] * 5, k=9)
        with pytest.raises(InfeasibleScaleError):
            de_bin(np.full(400, 0.2), k=3, seed=0, de_params=DEParams(max_generations=5, stagnation=3))

    def test_default_nine_classes(self):
        rng = np.random.default_rng(6)
        pds = rng.beta(0.7, 15, 5000)
        scale = de_bin(pds, seed=1, de_params=DEParams(max_generations=80))
        assert scale.labels[0] == "AAA" and scale.labels[-1] == "C"
        assert all(b > a for a, b in zip(scale.boundaries, scale.boundaries[1:]))
        assert all(b >= a for a, b in zip(scale.class_pd, scale.class_pd[1:]))
        assert min(scale.class_counts) >= 0.005 * 5000
        again = de_bin(pds, seed=1, de_params=DEParams(max_generations=80))
        assert again.to_dict() == scale.to_dict()

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=30))
    def test_assign_total(self, pds):
        scale = RatingScale(["a", "b", "c"], [0.1, 0.5], [0.05, 0.3, 0.7], [1, 1, 1])
        idx = scale.assign(pds)
        assert ((idx >= 0) & (idx < 3)).all()


class TestBinomial:
    def test_examples(self):
        assert binomial_test(0, 50, 0.2) == (1.0, True)
        p, ok = binomial_test(10, 10, 0.5)
        assert p == 0.0009765625 and not ok
        assert binomial_test(1, 1, 0.3)[0] == pytest.approx(0.3, rel=1e-12)

    def test_domain(self):
        with pytest.raises(ValueError):
            binomial_test(1, 10, 1.0)

    @given(st.integers(1, 400), st.floats(0.001, 0.999), st.data())
    def test_matches_scipy(self, n, pd, data):
        k = data.draw(st.integers(0, n))
        assert binomial_test(k, n, pd)[0] == pytest.approx(binom.sf(k - 1, n, pd), rel=1e-9, abs=1e-300)

    def test_type_one_error(self):
        rng = np.random.default_rng(0)
        x = rng.binomial(1000, 0.1, 10000)
        rejected = np.mean([not binomial_test(int(v), 1000, 0.1)[1] for v in x])
        assert 0.035 <= rejected <= 0.055


class TestTrafficLight:
    def test_examples(self):
        assert traffic_light(0.05, 0.10, 100) == "Green"
        assert traffic_light(0.12, 0.10, 100) == "Yellow"
        assert traffic_light(0.13, 0.10, 100) == "Orange"
        assert traffic_light(0.15, 0.10, 100) == "Red"
        assert traffic_light(0.320, 0.318, 1000) == "Yellow"
        assert traffic_light(0.316, 0.318, 1000) == "Green"

    def test_simulated_frequencies(self):
        rng = np.random.default_rng(1)
        pd_k = rng.uniform(0.02, 0.2, 20000)
        p_k = rng.binomial(1000, pd_k) / 1000
        colors = [traffic_light(p, q, 1000) for p, q in zip(p_k, pd_k)]
        freq = {c: colors.count(c) / len(colors) for c in ("Green", "Yellow", "Orange", "Red")}
        for c, target in zip(freq, (0.50, 0.30, 0.125, 0.075)):
            assert abs(freq[c] - target) <= 0.02, (c, freq[c])


class TestValidateScale:
    def scale(self):
        return RatingScale(["A", "B", "C"], [0.05, 0.2], [0.02, 0.1, 0.4], [100, 100, 100])

    def test_rows(self):
        pds = np.r_[np.full(100, 0.01), np.full(100, 0.1), np.full(10, 0.5)]
        y = np.r_[np.zeros(100), np.r_[np.ones(40), np.zeros(60)], np.ones(10)]
        rows = validate_scale(self.scale(), pds, y)
        a, b, c = rows
        assert a.traffic_light == "Green" and a.binomial_pass is True and a.observed_rate == 0
        assert b.traffic_light == "Red" and b.binomial_pass is False
        assert c.binomial_p is None and c.count == 10
        frame = validation_frame(rows)
        assert frame["binomial_test"].tolist() == ["Passed", "Failed", "-"]

    def test_empty_class(self):
        rows = validate_scale(self.scale(), [0.01, 0.02], [0, 0])
        assert rows[1].count == 0 and rows[1].binomial_p is None and rows[1].traffic_light is None

    def test_failures_threshold(self):
        pds = np.r_[np.full(100, 0.01), np.full(100, 0.1), np.full(100, 0.3)]
        y = np.r_[np.r_[np.ones(20), np.zeros(80)], np.r_[np.ones(40), np.zeros(60)], np.zeros(100)]
        rows = validate_scale(self.scale(), pds, y)
        assert scale_failures(rows, max_flagged=1) == ["A", "B"]
        assert scale_failures(rows, max_flagged=2) == []

    def test_empty_sample(self):
        with pytest.raises(ValueError):
            validate_scale(self.scale(), [], [])
