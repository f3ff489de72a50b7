import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ratemill.boster import auc
from ratemill.calibrator import CalibrationMap, brier, brier_skill, fit_beta, reliability


def simulate(n, a, b, c, seed):
    rng = np.random.default_rng(seed)
    p = rng.beta(1.2, 4.0, n)
    truth = CalibrationMap(a, b, c)(p)
    y = (rng.random(n) < truth).astype(int)
    return p, y


class TestMap:
    def test_identity(self):
        p = np.linspace(1e-6, 1 - 1e-6, 1000)
        np.testing.assert_allclose(CalibrationMap(1, 1, 0)(p), p, rtol=4 * np.finfo(float).eps, atol=0)

    def test_negative_shape_rejected(self):
        with pytest.raises(ValueError):
            CalibrationMap(-0.1, 1, 0)

    @given(st.floats(0, 5), st.floats(0, 5), st.floats(-5, 5),
           st.floats(1e-6, 1 - 1e-6), st.floats(1e-6, 1 - 1e-6))
    def test_monotone_and_in_unit_interval(self, a, b, c, p1, p2):
        m = CalibrationMap(a, b, c)
        lo, hi = sorted((p1, p2))
        out = m(np.array([lo, hi]))
        assert out[0] <= out[1]
        assert ((out > 0) & (out < 1)).all()


class TestFit:
    def test_recovers_identity(self):
        p, y = simulate(50000, 1, 1, 0, 0)
        m = fit_beta(p, y)
        assert (m.a, m.b, m.c) == pytest.approx((1, 1, 0), abs=0.1)

    def test_recovers_shifted_truth(self):
        p, y = simulate(50000, 1.4, 0.7, -0.6, 1)
        m = fit_beta(p, y)
        assert (m.a, m.b, m.c) == pytest.approx((1.4, 0.7, -0.6), abs=0.1)

    def test_doubled_odds(self):
        rng = np.random.default_rng(2)
        q = rng.beta(1.2, 4.0, 60000)
        y = (rng.random(len(q)) < q).astype(int)
        odds = 2 * q / (1 - q)
        scores = odds / (1 + odds)
        m = fit_beta(scores, y)
        assert m.c == pytest.approx(-math.log(2), abs=0.1)

    def test_negative_coefficient_pinned(self):
        rng = np.random.default_rng(3)
        p = rng.random(5000)
        y = (rng.random(5000) < 1 - p).astype(int)  # anti-correlated scores
        m = fit_beta(p, y)
        assert m.a >= 0 and m.b >= 0 and m.fit_meta["dropped"] is not None

    def test_brier_improves_and_auc_unchanged(self):
        rng = np.random.default_rng(4)
        q = rng.beta(1.0, 8.0, 20000)
        y = (rng.random(len(q)) < q).astype(int)
        raw = np.sqrt(q)  # systematically over-confident
        m = fit_beta(raw, y)
        post = m(raw)
        assert brier(post, y) < brier(raw, y)
        assert auc(post, y) == auc(raw, y)

    def test_single_class(self):
        with pytest.raises(ValueError):
            fit_beta([0.2, 0.3], [0, 0])


class TestBrier:
    def test_examples(self):
        assert brier([1, 0, 1], [1, 0, 1]) == 0
        assert brier([0.5] * 4, [1, 0, 0, 0]) == 0.25
        assert brier([0.8, 0.2], [1, 0]) == pytest.approx(0.04)

    def test_empty(self):
        with pytest.raises(ValueError):
            brier([], [])

    def test_skill(self):
        assert brier_skill([0.9, 0.1, 0.9, 0.1], [1, 0, 1, 0]) == pytest.approx(0.96)
        assert brier_skill([0.25] * 4, [1, 0, 0, 0]) == pytest.approx(0.0)
        assert brier_skill([1, 0], [1, 0]) == 1.0
        with pytest.raises(ValueError):
            brier_skill([0.3, 0.4], [1, 1])


class TestReliability:
    def test_calibrated_sample(self):
        rng = np.random.default_rng(5)
        f = rng.random(100000)
        o = (rng.random(len(f)) < f).astype(int)
        t = reliability(f, o).bins
        assert (t["mean_forecast"] - t["observed_rate"]).abs().max() < 0.02
        assert t["count"].sum() == 100000

    def test_one_bin(self):
        t = reliability([0.31, 0.32, 0.33], [0, 1, 0]).bins
        assert (t["count"] > 0).sum() == 1

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=50), st.integers(2, 20))
    def test_partition(self, f, k):
        table = reliability(f, np.zeros(len(f)), k)
        assert table.total == len(f)
        b = table.bins
        assert b["lower"].iloc[0] == 0 and b["upper"].iloc[-1] == 1
        np.testing.assert_array_equal(b["upper"].to_numpy()[:-1], b["lower"].to_numpy()[1:])
