import numpy as np
import pandas as pd
import pytest
from hypothesis import given, strategies as st

from ratemill.crbridge import (
    LOOKBACK_FEATURES, CrCreditLine, CrMonthlyHistory, InsufficientHistoryError, Lookups, aggregate_by_category,
    aggregate_past_due, apply_materiality, build_pairs, map_frame, map_to_features,
)
from ratemill.datamodel import add_months
from ratemill.featurekit import make_kpis

CODES_180 = (827, 831, 125, 129, 133, 137)
CODES_90 = (826, 830, 124, 128, 132, 136)
OTHER = (100, 110, 120, 200, 300)


def line(cat="revocable_risk", status=100, granted=1000.0, used=0.0, past_due=0.0, month="2021-03",
         cid="c1", original="not_applicable"):
    remaining = "not_applicable" if cat == "revocable_risk" else "gt1y"
    if cat != "revocable_risk" and original == "not_applicable":
        original = "y1to5"
    return CrCreditLine(cid, month, cat, status, granted, used, past_due, original, remaining)


def history(monthly_lines, end="2021-03", phenomena=(), cid="c1"):
    n = len(monthly_lines)
    months = [(add_months(end, k - n + 1), lines) for k, lines in enumerate(monthly_lines)]
    return CrMonthlyHistory(cid, months, set(phenomena))


class TestAggregation:
    @pytest.mark.parametrize("code", CODES_180)
    def test_180_codes(self, code):
        b = aggregate_past_due([line(status=code, granted=1000.0)])
        assert (b.past_due_180, b.past_due_90, b.past_due_30, b.past_due_0) == (1000.0, 0, 0, 0)

    @pytest.mark.parametrize("code", CODES_90)
    def test_90_codes(self, code):
        b = aggregate_past_due([line(status=code, granted=500.0)])
        assert (b.past_due_180, b.past_due_90, b.past_due_30, b.past_due_0) == (0, 500.0, 0, 0)

    @pytest.mark.parametrize("code", OTHER)
    def test_other_codes(self, code):
        b = aggregate_past_due([line(status=code, granted=800.0, past_due=120.0)])
        assert (b.past_due_180, b.past_due_90, b.past_due_30, b.past_due_0) == (0, 0, 120.0, 680.0)

    def test_empty(self):
        b = aggregate_past_due([])
        assert (b.past_due_180, b.past_due_90, b.past_due_30, b.past_due_0) == (0, 0, 0, 0)

    def test_inconsistent(self):
        with pytest.raises(ValueError, match="inconsistent amounts"):
            aggregate_past_due([line(status=100, granted=100.0, past_due=300.0)])

    def test_by_category(self):
        out = aggregate_by_category([line(status=827, granted=50.0),
                                     line("maturity_risk", status=826, granted=70.0),
                                     line("collateral", status=827, granted=999.0)])
        assert out["revocable_risk"].past_due_180 == 50.0
        assert out["maturity_risk"].past_due_90 == 70.0

    @given(st.lists(st.tuples(st.sampled_from(CODES_180 + CODES_90 + OTHER),
                              st.floats(0, 1e6), st.floats(0, 1)), max_size=12))
    def test_partition(self, specs):
        lines = [line(status=s, granted=g, past_due=g * f if s in OTHER else 0.0) for s, g, f in specs]
        b = aggregate_past_due(lines)
        assert b.total == pytest.approx(sum(ln.granted for ln in lines), rel=1e-9, abs=1e-6)


class TestMateriality:
    @pytest.mark.parametrize("past_due,total,expected", [
        (400, 100000, False), (600, 100000, False), (2000, 100000, True), (500, 50000, True),
        (499.99, 100, False), (500, 0, True), (0, 0, False),
    ])
    def test_truth_table(self, past_due, total, expected):
        assert apply_materiality(past_due, total) is expected

    @given(st.floats(0, 1e7), st.floats(0, 1e7), st.floats(0, 1e7))
    def test_monotone(self, a, extra, total):
        if apply_materiality(a, total):
            assert apply_materiality(a + extra, total)


class TestMapping:
    def test_single_month(self):
        h = history([[line(granted=10000.0, used=4000.0)]])
        with pytest.raises(InsufficientHistoryError) as err:
            map_to_features(h)
        assert set(err.value.features) == set(LOOKBACK_FEATURES)
        assert "worst_payment_delay_6m" in str(err.value)
        snap = map_to_features(h, strict=False)
        assert snap.nrt_balance == 10000.0
        assert make_kpis(snap)["draw_ratio_nrt"] == pytest.approx(0.4)

    def test_thirteen_months_one_decrease(self):
        months = [[line(granted=5000.0 if k < 8 else 3000.0), line("maturity_risk", granted=2000.0)]
                  for k in range(13)]
        snap = map_to_features(history(months))
        k = make_kpis(snap)
        assert snap.nrt_contracts_12m == 1 and k["closed_nrt"] == 1
        assert snap.past_due_0_contracts_12m == 1 and k["closed_past_due_0"] == 1
        assert snap.contracts_3m == 0 and snap.contracts_4_12m == 0
        assert snap.nrt_contracts == 1 and snap.rt_non_mortgages_balance == 2000.0

    def test_decrease_with_past_due_not_clean(self):
        months = [[line(granted=5000.0 if k < 8 else 3000.0, status=826 if k == 7 else 100)] for k in range(13)]
        snap = map_to_features(history(months))
        assert snap.nrt_contracts_12m == 1
        assert snap.past_due_0_contracts_12m == 0

    def test_npl_phenomenon(self):
        months = [[line()] for _ in range(13)]
        assert map_to_features(history(months, phenomena={"000551000"})).def_no == 1
        assert map_to_features(history(months, phenomena={"000123000"})).def_no == 0

    def test_opening_windows(self):
        base = [line("maturity_risk", granted=1000.0)]
        months = [list(base) for _ in range(13)]
        months[11] = base + [line("maturity_risk", granted=500.0)]  # t-1: recent
        months[12] = list(months[11])
        months[5] = base + [line("maturity_risk", granted=200.0)]  # t-7, then repaid
        snap = map_to_features(history(months))
        assert snap.contracts_3m == 1
        assert snap.contracts_4_12m == 1

    def test_increase_followed_by_closure_ignored(self):
        months = [[line("maturity_risk", granted=1000.0)] for _ in range(13)]
        months[4] = [line("maturity_risk", granted=1500.0)]
        months[9] = []
        snap = map_to_features(history(months))
        assert snap.contracts_4_12m == 0

    def test_days_proxy_with_materiality(self):
        months = [[line(granted=100000.0)] for _ in range(13)]
        months[10] = [line(granted=100000.0, status=100, past_due=600.0)]  # 0.6% -> not material
        assert map_to_features(history(months)).max_past_due_days_6m == 0
        months[10] = [line(granted=100000.0, status=100, past_due=2000.0)]
        assert map_to_features(history(months)).max_past_due_days_6m == 30
        months[11] = [line(granted=90000.0), line(granted=10000.0, status=826)]
        assert map_to_features(history(months)).max_past_due_days_6m == 90
        rt = [[line("maturity_risk", granted=50000.0)] for _ in range(13)]
        rt[12] = [line("maturity_risk", granted=40000.0), line("maturity_risk", granted=10000.0, status=831)]
        snap = map_to_features(history(rt))
        assert snap.worst_payment_delay_6m == 6
        assert snap.max_past_due_days_6m == 0

    def test_old_delinquency_outside_six_months(self):
        months = [[line(granted=10000.0)] for _ in range(13)]
        months[3] = [line(granted=10000.0, status=827)]
        assert map_to_features(history(months)).max_past_due_days_6m == 0

    def test_mortgage_split_and_passthrough(self):
        months = [[line("maturity_risk", granted=7000.0, original="gt5y"),
                   line("maturity_risk", granted=3000.0, original="lt1y"),
                   line("self_liquidating", granted=99999.0, status=827)] for _ in range(13)]
        snap = map_to_features(history(months))
        assert snap.rt_mortgages_balance == 7000.0 and snap.rt_non_mortgages_balance == 3000.0
        assert snap.max_past_due_days_6m == 0 and snap.worst_payment_delay_6m == 0

    def test_lookups_and_special_status(self):
        months = [[line()] for _ in range(13)]
        lk = Lookups(protest={"c1": True}, legal_type={"c1": "DI"}, special_status={"c1": "npl"},
                     sector={"c1": (1.0, 2.0, 3.0, 4.0, 5.0)})
        snap = map_to_features(history(months), lk)
        assert snap.protest_present and snap.legal_type == "DI" and snap.special_status == "none"
        assert snap.sector_vector == (1.0, 2.0, 3.0, 4.0, 5.0)
        lk.special_status["c1"] = "insolvency"
        assert map_to_features(history(months), lk).special_status == "insolvency"

    def test_revocable_durations_validated(self):
        with pytest.raises(ValueError):
            CrCreditLine("c", "2021-01", "revocable_risk", 100, 1.0, 0.0, 0.0, "gt5y", "gt1y")

    def test_months_increasing(self):
        with pytest.raises(ValueError):
            CrMonthlyHistory("c", [("2021-02", []), ("2021-01", [])])

    def test_frame_matches_single_company_mapping(self):
        rng = np.random.default_rng(0)
        rows, expected = [], {}
        for c in range(25):
            cid = f"c{c}"
            months = []
            for k in range(13):
                month = add_months("2021-03", k - 12)
                lines = []
                for _ in range(int(rng.integers(0, 4))):
                    cat = str(rng.choice(["revocable_risk", "maturity_risk", "collateral"]))
                    status = int(rng.choice(CODES_180 + CODES_90 + OTHER))
                    g = float(rng.integers(0, 5) * 1000)
                    pdue = g * 0.5 if status in OTHER and rng.random() < 0.3 else 0.0
                    ln = line(cat, status, g, used=g * 0.3 if cat == "revocable_risk" else 0.0, past_due=pdue,
                              month=month, cid=cid,
                              original="not_applicable" if cat == "revocable_risk" else str(rng.choice(["lt1y", "gt5y"])))
                    lines.append(ln)
                    rows.append(ln.__dict__)
                months.append((month, lines))
            if not any(lines for _, lines in months[:1]):
                months[0][1].append(line(month=months[0][0], cid=cid))
                rows.append(months[0][1][-1].__dict__)
            expected[cid] = map_to_features(CrMonthlyHistory(cid, months))
        frame, report = map_frame(pd.DataFrame(rows), None, Lookups(), reference_month="2021-03")
        assert report["companies"] == 25
        got = {r["company_id"]: r for r in frame.to_dict("records")}
        for cid, snap in expected.items():
            for key, value in snap.to_row().items():
                assert got[cid][key] == value, (cid, key)

    def test_frame_skips_short_history(self):
        rows = [line(month="2021-03", cid="short").__dict__]
        frame, report = map_frame(pd.DataFrame(rows), None, Lookups())
        assert len(frame) == 0 and report["skipped_insufficient_history"] == ["short"]
        frame, _ = map_frame(pd.DataFrame(rows), None, Lookups(), strict=False)
        assert frame["nrt_balance"].tolist() == [1000.0]


def test_build_pairs_alignment():
    cr = pd.DataFrame({"company_id": ["a", "b", "x"], "reference_date": "2021-03"})
    bureau = pd.DataFrame({"company_id": ["b", "a"], "reference_date": "2021-03"})
    from ratemill.datamodel import normalize_snapshots
    cr, bureau = normalize_snapshots(cr).fillna(0), normalize_snapshots(bureau).fillna(0)
    cr["nrt_balance"] = [1.0, 2.0, 3.0]
    bureau["nrt_balance"] = [20.0, 10.0]
    pairs = build_pairs(cr, bureau, ["nrt_balance"])
    assert pairs["company_id"].tolist() == ["a", "b"]
    assert pairs["nrt_balance_cr"].tolist() == [1.0, 2.0]
    assert pairs["nrt_balance_bureau"].tolist() == [10.0, 20.0]
