import numpy as np
import pandas as pd
import pytest
from hypothesis import given, strategies as st

from ratemill.datamodel import CompanySnapshot
from ratemill.featurekit import (
    FeatureConfig, FeaturePipeline, SelectionConfig, bucket, drop_sparse, james_stein_encode,
    js_shrinkage, make_kpis, safe_ratio, shadow_select, vif_prune, vif_scores,
)
from ratemill.matrix import FeatureMatrix


def r2_oracle(X, i):
    """R^2 of column i regressed on the others plus an intercept, via lstsq on the raw design."""
    others = np.delete(X, i, axis=1)
    design = np.column_stack([np.ones(len(X)), others])
    coef, *_ = np.linalg.lstsq(design, X[:, i], rcond=None)
    resid = X[:, i] - design @ coef
    tss = ((X[:, i] - X[:, i].mean()) ** 2).sum()
    return 1 - resid @ resid / tss


class TestDropSparse:
    def matrix(self, missing_counts, n=100):
        cols = []
        for k in missing_counts:
            v = np.ones(n)
            v[:k] = np.nan
            cols.append(v)
        return FeatureMatrix([f"c{i}" for i in range(len(cols))], np.column_stack(cols))

    def test_boundary(self):
        out, dropped = drop_sparse(self.matrix([0, 21, 20]), 0.20)
        assert out.column_names == ["c0", "c2"]
        assert dropped == ["c1"]

    def test_all_dropped(self):
        with pytest.raises(ValueError, match="empty feature matrix"):
            drop_sparse(self.matrix([50, 60]), 0.20)

    def test_threshold_domain(self):
        with pytest.raises(ValueError):
            drop_sparse(self.matrix([0]), 1.0)


class TestKpis:
    def test_rt_balance(self):
        k = make_kpis(CompanySnapshot("c", "2020-01", rt_mortgages_balance=100, rt_non_mortgages_balance=50))
        assert k["rt_balance"] == 150

    def test_zero_over_zero(self):
        assert make_kpis(CompanySnapshot("c", "2020-01"))["draw_ratio_nrt"] == 0

    def test_positive_over_zero_is_cap(self):
        k = make_kpis(CompanySnapshot("c", "2020-01", nrt_balance=10, nrt_used=5))
        assert k["nrt_rt_ratio"] == 1e6 and k["draw_ratio_nrt"] == 0.5

    def test_npl_flag(self):
        assert make_kpis(CompanySnapshot("c", "2020-01", def_no=2))["npl_present"] == 1

    @pytest.mark.parametrize("days,expected", [(0, 0), (4, 0), (5, 1), (29, 1), (30, 2), (60, 3), (90, 4),
                                               (120, 5), (179, 5), (180, 6), (999, 6)])
    def test_nrt_bins(self, days, expected):
        assert bucket(days) == expected

    def test_alternative_edges(self):
        assert bucket(200, (0, 1, 30, 90, 180, 181)) == 5
        assert bucket(180, (0, 1, 30, 90, 180, 181)) == 4

    @given(st.integers(0, 5), st.integers(0, 5), st.integers(0, 5), st.integers(0, 5), st.integers(0, 5))
    def test_flags_match_predicates(self, a, b, c, d, e):
        snap = CompanySnapshot("c", "2020-01", def_no=a, past_due_0_contracts_12m=b, nrt_contracts_12m=c,
                               past_due_0_contracts=d, nrt_contracts=e)
        k = make_kpis(snap)
        assert k["npl_present"] == float(a >= 1)
        assert k["closed_past_due_0"] == float(b >= 1)
        assert k["closed_nrt"] == float(c >= 1)
        assert k["past_due_0"] == float(d >= 1)
        assert k["nrt_present"] == float(e >= 1)

    @given(st.floats(0, 1e9), st.floats(0, 1e9))
    def test_safe_ratio_finite(self, num, den):
        r = float(safe_ratio(num, den))
        assert np.isfinite(r) and r >= 0


class TestJamesStein:
    def test_formula_example(self):
        # two categories with means 0.2 / 0.4, 50 rows each, s2 = 0.24, tau2 = 0.01
        B = float(js_shrinkage(50, 0.24, 0.01))
        assert B == pytest.approx(0.0048 / 0.0148)
        assert B == pytest.approx(0.324, abs=5e-4)
        low = (1 - B) * 0.2 + B * 0.3
        high = (1 - B) * 0.4 + B * 0.3
        assert low == pytest.approx(0.2324, abs=1e-4)
        assert high == pytest.approx(0.3676, abs=1e-4)

    def test_encoder_matches_hand_computation(self):
        cats = np.array(["a"] * 50 + ["b"] * 50)
        y = np.array([1] * 10 + [0] * 40 + [1] * 20 + [0] * 30, dtype=float)
        state = james_stein_encode(cats, y)
        s2 = (50 * 0.2 * 0.8 + 50 * 0.4 * 0.6) / 98
        tau2 = np.var([0.2, 0.4])
        B = (s2 / 50) / (s2 / 50 + tau2)
        assert state.encoded["a"] == pytest.approx((1 - B) * 0.2 + B * 0.3)
        assert state.encoded["b"] == pytest.approx((1 - B) * 0.4 + B * 0.3)
        assert state.transform(["zzz"])[0] == pytest.approx(0.3)

    def test_equal_means(self):
        state = james_stein_encode(["a", "a", "b", "b"], [0, 1, 1, 0])
        assert state.encoded == {"a": 0.5, "b": 0.5}

    def test_constant_target(self):
        state = james_stein_encode(["a", "b", "c"], [1, 1, 1])
        assert set(state.encoded.values()) == {1.0}

    def test_large_n_tends_to_mean(self):
        cats = np.array(["a"] * 200000 + ["b"] * 200000)
        y = np.r_[np.tile([1, 0, 0, 0, 0], 40000), np.tile([1, 1, 0, 0, 0], 40000)].astype(float)
        state = james_stein_encode(cats, y)
        assert state.encoded["a"] == pytest.approx(0.2, abs=1e-4)

    def test_needs_two_categories(self):
        with pytest.raises(ValueError):
            james_stein_encode(["a", "a"], [0, 1])

    @given(st.lists(st.tuples(st.sampled_from("abcd"), st.integers(0, 1)), min_size=6, max_size=80),
           st.floats(-5, 5))
    def test_shift_consistent_and_between(self, rows, shift):
        cats = [c for c, _ in rows]
        if len(set(cats)) < 2:
            return
        y = np.array([t for _, t in rows], dtype=float)
        base = james_stein_encode(cats, y)
        moved = james_stein_encode(cats, y + shift)
        for k in base.encoded:
            assert moved.encoded[k] == pytest.approx(base.encoded[k] + shift, abs=1e-9)
            mean = y[np.array(cats) == k].mean()
            lo, hi = sorted((mean, base.global_mean))
            assert lo - 1e-12 <= base.encoded[k] <= hi + 1e-12


class TestVif:
    def test_orthogonal(self):
        X = np.linalg.qr(np.random.default_rng(0).normal(size=(200, 4)))[0]
        X -= X.mean(axis=0)
        X = np.linalg.qr(X)[0]
        m = FeatureMatrix(list("abcd"), X)
        out, dropped = vif_prune(m)
        assert dropped == [] and out.column_names == list("abcd")

    def test_matches_lstsq_oracle(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(500, 4))
        X[:, 3] += 0.7 * X[:, 0]
        expected = [1 / (1 - r2_oracle(X, i)) for i in range(4)]
        np.testing.assert_allclose(vif_scores(X), expected, rtol=1e-9)

    def test_duplicate(self):
        x = np.random.default_rng(2).normal(size=(100, 2))
        m = FeatureMatrix(["a", "b", "a_copy"], np.column_stack([x, x[:, 0]]))
        out, dropped = vif_prune(m)
        assert dropped == ["a_copy"]

    def test_near_sum(self):
        rng = np.random.default_rng(3)
        x1, x2 = rng.normal(size=(2, 1000))
        x3 = x1 + x2 + rng.normal(0, 0.01, 1000)
        X = np.column_stack([x1, x2, x3])
        assert min(1 / (1 - r2_oracle(X, i)) for i in range(3)) > 10
        out, dropped = vif_prune(FeatureMatrix(["x1", "x2", "x3"], X))
        assert len(dropped) == 1 and len(out.column_names) == 2

    def test_keep_list_conflict(self):
        x = np.random.default_rng(4).normal(size=100)
        m = FeatureMatrix(["a", "b"], np.column_stack([x, x]))
        with pytest.raises(ValueError, match="keep-list conflict"):
            vif_prune(m, keep_list={"a", "b"})

    @given(st.integers(0, 10_000), st.integers(2, 6))
    def test_result_below_threshold(self, seed, p):
        rng = np.random.default_rng(seed)
        base = rng.normal(size=(150, p))
        mix = base @ rng.normal(size=(p, p + 2))
        X = mix + 0.05 * rng.normal(size=mix.shape)
        out, _ = vif_prune(FeatureMatrix([f"f{i}" for i in range(p + 2)], X))
        assert (vif_scores(out.values) <= 10.0).all()


def signal_noise(n=4000, seed=0):
    rng = np.random.default_rng(seed)
    signal = rng.normal(size=n)
    noise = rng.normal(size=n)
    y = (rng.random(n) < 1 / (1 + np.exp(-(-1.5 + 2.0 * signal)))).astype(int)
    return signal, noise, y, rng


FAST = SelectionConfig(n_rounds=40, shap_rows=1000)


class TestShadowSelect:
    def test_signal_kept_noise_dropped(self):
        signal, noise, y, _ = signal_noise()
        m = FeatureMatrix(["signal", "noise"], np.column_stack([signal, noise]), y)
        selected, report = shadow_select(m, rounds=5, seed=0, config=FAST)
        assert selected == ["signal"]
        assert report["votes"]["signal"] == 5

    def test_group_all_or_nothing(self):
        signal, noise, y, rng = signal_noise(seed=1)
        emb = np.column_stack([signal + rng.normal(0, 0.5, len(y)) if i == 0 else rng.normal(size=len(y))
                               for i in range(5)])
        names = [f"e{i}" for i in range(5)] + ["noise"]
        groups = {f"e{i}": "emb" for i in range(5)}
        m = FeatureMatrix(names, np.column_stack([emb, noise]), y, groups)
        selected, _ = shadow_select(m, rounds=3, seed=2, config=FAST)
        assert selected == [f"e{i}" for i in range(5)]

    def test_single_class(self):
        m = FeatureMatrix(["a"], np.zeros((10, 1)), np.zeros(10))
        with pytest.raises(ValueError):
            shadow_select(m, seed=0)

    def test_deterministic(self):
        signal, noise, y, _ = signal_noise(2000, seed=3)
        m = FeatureMatrix(["signal", "noise"], np.column_stack([signal, noise]), y)
        assert shadow_select(m, 3, 7, FAST) == shadow_select(m, 3, 7, FAST)

    @pytest.mark.slow
    def test_fifty_five_to_about_twenty(self):
        rng = np.random.default_rng(5)
        n, p_signal, p_total = 12000, 20, 55
        X = rng.normal(size=(n, p_total))
        coef = np.zeros(p_total)
        coef[:p_signal] = np.linspace(0.35, 0.9, p_signal)
        y = (rng.random(n) < 1 / (1 + np.exp(-(-2.0 + X @ coef)))).astype(int)
        m = FeatureMatrix([f"f{i:02d}" for i in range(p_total)], X, y)
        selected, _ = shadow_select(m, rounds=5, seed=0, config=SelectionConfig(n_rounds=60, shap_rows=2000))
        assert 15 <= len(selected) <= 25
        assert not any(s.startswith("shadow__") for s in selected)


def synthetic_snapshots(n=3000, seed=0):
    rng = np.random.default_rng(seed)
    u = rng.normal(size=n)
    y = (rng.random(n) < 1 / (1 + np.exp(-(-2.5 + 1.5 * u)))).astype(int)
    frame = pd.DataFrame({
        "company_id": [f"c{i}" for i in range(n)], "reference_date": "2020-03",
        "legal_type": rng.choice(["DI", "SC", "SP"], n), "special_status": "none",
        "rt_mortgages_balance": rng.exponential(1000, n), "rt_non_mortgages_balance": rng.exponential(500, n),
        "nrt_balance": rng.exponential(800, n) * np.exp(-0.3 * u),
        "nrt_past_due_balance": 0.0, "worst_payment_delay_6m": rng.poisson(np.exp(u - 1)),
        "max_past_due_days_6m": 0, "def_no": 0, "past_due_0_contracts": rng.poisson(2, n),
        "past_due_0_contracts_12m": 0, "nrt_contracts": rng.poisson(1, n), "nrt_contracts_12m": 0,
        "contracts_3m": 0, "contracts_4_12m": 0, "protest_present": False, "is_private_individual": False,
        "target": y,
    })
    frame["nrt_used"] = frame["nrt_balance"] * 1 / (1 + np.exp(-u))
    for i in range(5):
        frame[f"sector_{i}"] = rng.normal(size=n)
    frame.loc[: int(0.3 * n), "nrt_past_due_balance"] = np.nan
    return frame


class TestPipeline:
    def test_fit_transform_round_trip(self):
        frame = synthetic_snapshots()
        cfg = FeatureConfig(selection={"n_rounds": 30, "shap_rows": 500}, shadow_rounds=3)
        pipe = FeaturePipeline(cfg).fit(frame)
        assert "nrt_past_due_balance" in pipe.dropped_sparse
        assert "draw_ratio_nrt" in pipe.selected
        sector = [c for c in pipe.selected if c.startswith("sector_")]
        assert len(sector) in (0, 5)
        again = FeaturePipeline.from_dict(pipe.to_dict())
        a, b = pipe.transform(frame), again.transform(frame)
        assert a.column_names == b.column_names == pipe.selected
        np.testing.assert_array_equal(a.values, b.values)
        assert not np.isnan(a.values).any()

    def test_no_selection(self):
        frame = synthetic_snapshots(800)
        pipe = FeaturePipeline(FeatureConfig()).fit(frame, select=False)
        assert "legal_type" in pipe.selected
        assert "votes" not in pipe.selection_report
