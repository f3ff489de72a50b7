"""Map Central Credit Register (CR) credit-line reports to the snapshot schema.

Only maturity (RT) and revocable (NRT) lines feed features. A line's
"balance" is its granted amount. Past-due balances are bucketed by status
code, and the bucket-derived day counts go through the materiality rule
before they are used.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .datamodel import SECTOR_COLUMNS, SNAPSHOT_COLUMNS, CompanySnapshot, month_index, month_label
from .featurekit import kpi_frame

log = logging.getLogger(__name__)

CATEGORIES = ("maturity_risk", "revocable_risk", "self_liquidating", "unsecured", "collateral",
              "derivative", "info")
ORIGINAL_DURATIONS = ("lt1y", "y1to5", "gt5y", "not_applicable")
REMAINING_DURATIONS = ("lt1y", "gt1y", "not_applicable")
STATUS_180 = frozenset({827, 831, 125, 129, 133, 137})
STATUS_90 = frozenset({826, 830, 124, 128, 132, 136})
NPL_PHENOMENON = "000551000"
LOOKBACK_MONTHS = 13
LOOKBACK_FEATURES = (
    "worst_payment_delay_6m", "max_past_due_days_6m", "past_due_0_contracts_12m",
    "nrt_contracts_12m", "contracts_3m", "contracts_4_12m",
)
CR_SPECIAL_STATUSES = ("dispute", "insolvency")
# bureau features whose CR value is a proxy rather than a direct copy
PROXY_FEATURES = LOOKBACK_FEATURES + ("def_no", "nrt_contracts")


class InsufficientHistoryError(ValueError):
    def __init__(self, months: int, features=LOOKBACK_FEATURES):
        self.features = tuple(features)
        super().__init__(f"insufficient history: {months} of {LOOKBACK_MONTHS} months; "
                         f"cannot compute {', '.join(self.features)}")


@dataclass(frozen=True)
class CrCreditLine:
    company_id: str
    reference_month: str
    category: str
    status_code: int
    granted: float
    used: float = 0.0
    past_due_amount: float = 0.0
    original_duration: str = "not_applicable"
    remaining_duration: str = "not_applicable"

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")
        if min(self.granted, self.used, self.past_due_amount) < 0:
            raise ValueError("amounts must be non-negative")
        if self.original_duration not in ORIGINAL_DURATIONS or self.remaining_duration not in REMAINING_DURATIONS:
            raise ValueError("unknown duration bucket")
        if self.category == "revocable_risk" and (
                self.original_duration != "not_applicable" or self.remaining_duration != "not_applicable"):
            raise ValueError("revocable lines carry no durations")


@dataclass
class CrMonthlyHistory:
    company_id: str
    months: list[tuple[str, list[CrCreditLine]]]
    phenomena: set[str] = field(default_factory=set)

    def __post_init__(self):
        idx = [month_index(m) for m, _ in self.months]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("months must be strictly increasing")


@dataclass(frozen=True)
class PastDueBalances:
    past_due_180: float = 0.0
    past_due_90: float = 0.0
    past_due_30: float = 0.0
    past_due_0: float = 0.0

    @property
    def total(self) -> float:
        return self.past_due_180 + self.past_due_90 + self.past_due_30 + self.past_due_0


def _buckets(status, granted, past_due):
    """Vectorised bucket sums for one set of lines."""
    in180 = np.isin(status, list(STATUS_180))
    in90 = np.isin(status, list(STATUS_90))
    other = ~(in180 | in90)
    b180 = float(granted[in180].sum())
    b90 = float(granted[in90].sum())
    b30 = float(past_due[other].sum())
    b0 = float(granted[other].sum()) - b30
    return b180, b90, b30, b0


def aggregate_past_due(lines) -> PastDueBalances:
    """Bucket a company-month's lines by past-due status."""
    lines = list(lines)
    if not lines:
        return PastDueBalances()
    status = np.array([ln.status_code for ln in lines])
    granted = np.array([ln.granted for ln in lines], dtype=np.float64)
    past_due = np.array([ln.past_due_amount for ln in lines], dtype=np.float64)
    b180, b90, b30, b0 = _buckets(status, granted, past_due)
    if b0 < -1e-9 * max(1.0, float(granted.sum())):
        raise ValueError("inconsistent amounts")
    return PastDueBalances(b180, b90, b30, max(b0, 0.0))


def aggregate_by_category(lines) -> dict[str, PastDueBalances]:
    lines = list(lines)
    return {cat: aggregate_past_due([ln for ln in lines if ln.category == cat])
            for cat in ("maturity_risk", "revocable_risk")}


def apply_materiality(past_due: float, total_balance: float, abs_threshold: float = 500.0,
                      rel_threshold: float = 0.01) -> bool:
    """Past due counts only when both the absolute and the relative floor are met."""
    if past_due < 0 or total_balance < 0:
        raise ValueError("amounts must be non-negative")
    if past_due < abs_threshold:
        return False
    if total_balance == 0:
        return past_due > 0
    return past_due / total_balance >= rel_threshold


@dataclass
class Lookups:
    protest: dict[str, bool] = field(default_factory=dict)
    legal_type: dict[str, str] = field(default_factory=dict)
    special_status: dict[str, str] = field(default_factory=dict)
    sector: dict[str, tuple[float, ...]] = field(default_factory=dict)

    @classmethod
    def from_dir(cls, path) -> "Lookups":
        path = Path(path)

        def load(name):
            file = path / f"{name}.csv"
            if not file.exists():
                return None
            return pd.read_csv(file, dtype={"company_id": str}, keep_default_na=False)

        out = cls()
        if (f := load("protest")) is not None:
            out.protest = {c: str(v).lower() in ("1", "true") for c, v in zip(f.company_id, f.protest_present)}
        if (f := load("legal_type")) is not None:
            out.legal_type = dict(zip(f.company_id, f.legal_type))
        if (f := load("special_status")) is not None:
            out.special_status = dict(zip(f.company_id, f.special_status))
        if (f := load("sector")) is not None:
            vals = f[list(SECTOR_COLUMNS)].to_numpy(dtype=float)
            out.sector = {c: tuple(map(float, v)) for c, v in zip(f.company_id, vals)}
        return out


@dataclass
class _Lines:
    """Columnar lines of one company, month offset 0 = oldest month in window."""

    month: np.ndarray
    category: np.ndarray
    status: np.ndarray
    granted: np.ndarray
    used: np.ndarray
    past_due: np.ndarray
    long_term: np.ndarray


def _days(status, granted, past_due, abs_threshold, rel_threshold):
    if len(granted) == 0:
        return 0
    b180, b90, b30, _ = _buckets(status, granted, past_due)
    total = float(granted.sum())
    if apply_materiality(b180, total, abs_threshold, rel_threshold):
        return 180
    if apply_materiality(b90, total, abs_threshold, rel_threshold):
        return 90
    if apply_materiality(b30, total, abs_threshold, rel_threshold):
        return 30
    return 0


def _map_lines(lines: _Lines, n_months: int, npl: bool, abs_threshold: float, rel_threshold: float) -> dict:
    t = n_months - 1
    rt = lines.category == "maturity_risk"
    nrt = lines.category == "revocable_risk"
    keep = rt | nrt
    if not (keep.all()):
        lines = _Lines(*(getattr(lines, f)[keep] for f in _Lines.__dataclass_fields__))
        rt, nrt = rt[keep], nrt[keep]
    m = lines.month
    rt_total = np.bincount(m[rt], weights=lines.granted[rt], minlength=n_months)
    nrt_total = np.bincount(m[nrt], weights=lines.granted[nrt], minlength=n_months)
    past_due_any = np.zeros(n_months)
    rt_days = np.zeros(n_months, dtype=np.int64)
    nrt_days = np.zeros(n_months, dtype=np.int64)
    for k in range(n_months):
        here = m == k
        for mask, days in ((here & rt, rt_days), (here & nrt, nrt_days)):
            if mask.any():
                s, g, p = lines.status[mask], lines.granted[mask], lines.past_due[mask]
                b180, b90, b30, b0 = _buckets(s, g, p)
                if b0 < -1e-9 * max(1.0, float(g.sum())):
                    raise ValueError("inconsistent amounts")
                past_due_any[k] += b180 + b90 + b30
                days[k] = _days(s, g, p, abs_threshold, rel_threshold)
    now = m == t
    s_now = lines.status[now]
    out = {
        "rt_mortgages_balance": float(lines.granted[now & rt & lines.long_term].sum()),
        "rt_non_mortgages_balance": float(lines.granted[now & rt & ~lines.long_term].sum()),
        "nrt_balance": float(nrt_total[t]),
        "nrt_used": float(lines.used[now & nrt].sum()),
        "def_no": int(npl),
        "past_due_0_contracts": int(np.sum((lines.past_due[now] == 0)
                                           & ~np.isin(s_now, list(STATUS_180 | STATUS_90)))),
        "nrt_contracts": int(np.sum(now & nrt & (lines.granted > 0))),
    }
    if out["nrt_used"] > out["nrt_balance"] > 0:
        raise ValueError("inconsistent amounts: revocable used exceeds granted")
    nrt_now = now & nrt
    b180, b90, b30, _ = _buckets(lines.status[nrt_now], lines.granted[nrt_now], lines.past_due[nrt_now])
    out["nrt_past_due_balance"] = b180 + b90 + b30
    lo6 = max(0, t - 5)
    out["worst_payment_delay_6m"] = int(rt_days[lo6:].max()) // 30
    out["max_past_due_days_6m"] = int(nrt_days[lo6:].max())
    # month-over-month movements inside the 12-month lookback
    window = range(max(1, t - 11), t + 1)
    total = rt_total + nrt_total
    out["nrt_contracts_12m"] = sum(1 for k in window if nrt_total[k] < nrt_total[k - 1])
    out["past_due_0_contracts_12m"] = sum(
        1 for k in window if total[k] < total[k - 1] and past_due_any[k] == 0 and past_due_any[k - 1] == 0)

    def opened(k):
        # a maturity increase not followed by the maturity book closing
        return rt_total[k] > rt_total[k - 1] and not np.any(rt_total[k + 1:t + 1] == 0)

    out["contracts_3m"] = sum(1 for k in window if k >= t - 2 and opened(k))
    out["contracts_4_12m"] = sum(1 for k in window if k < t - 2 and opened(k))
    return out


def _assemble(company_id: str, reference_month: str, values: dict, lookups: Lookups) -> CompanySnapshot:
    status = lookups.special_status.get(company_id, "none")
    return CompanySnapshot(
        company_id=company_id,
        reference_date=reference_month,
        legal_type=lookups.legal_type.get(company_id, "SC"),
        special_status=status if status in CR_SPECIAL_STATUSES else "none",
        sector_vector=lookups.sector.get(company_id, (0.0,) * 5),
        protest_present=bool(lookups.protest.get(company_id, False)),
        is_private_individual=False,
        **values,
    )


def map_to_features(history: CrMonthlyHistory, lookups: Lookups | None = None, *,
                    strict: bool = True, abs_threshold: float = 500.0,
                    rel_threshold: float = 0.01) -> CompanySnapshot:
    """Snapshot at the last month of ``history``.

    With ``strict`` the full 13-month window is required; otherwise lookback
    features use whatever months are present.
    """
    lookups = lookups or Lookups()
    if not history.months:
        raise InsufficientHistoryError(0)
    ref = month_index(history.months[-1][0])
    first = max(month_index(history.months[0][0]), ref - LOOKBACK_MONTHS + 1)
    n_months = ref - first + 1
    if strict and n_months < LOOKBACK_MONTHS:
        raise InsufficientHistoryError(n_months)
    rows = [(month_index(mon) - first, ln) for mon, lines in history.months
            if month_index(mon) >= first for ln in lines]
    lines = _Lines(
        month=np.array([k for k, _ in rows], dtype=np.int64),
        category=np.array([ln.category for _, ln in rows], dtype=object),
        status=np.array([ln.status_code for _, ln in rows], dtype=np.int64),
        granted=np.array([ln.granted for _, ln in rows], dtype=np.float64),
        used=np.array([ln.used for _, ln in rows], dtype=np.float64),
        past_due=np.array([ln.past_due_amount for _, ln in rows], dtype=np.float64),
        long_term=np.array([ln.original_duration == "gt5y" for _, ln in rows], dtype=bool),
    )
    values = _map_lines(lines, n_months, NPL_PHENOMENON in history.phenomena, abs_threshold, rel_threshold)
    return _assemble(history.company_id, month_label(ref), values, lookups)


def read_lines(path) -> pd.DataFrame:
    frame = pd.read_csv(path, dtype={"company_id": str, "reference_month": str}, keep_default_na=False)
    required = {"company_id", "reference_month", "category", "status_code", "granted", "used",
                "past_due_amount", "original_duration", "remaining_duration"}
    missing = required - set(frame.columns)
    if missing:
        raise ValueError(f"missing credit-line columns: {sorted(missing)}")
    return frame


def read_phenomena(path) -> pd.DataFrame:
    return pd.read_csv(path, dtype={"company_id": str, "reference_month": str, "code": str}, keep_default_na=False)


def map_frame(lines: pd.DataFrame, phenomena: pd.DataFrame | None, lookups: Lookups,
              reference_month: str | None = None, strict: bool = True,
              abs_threshold: float = 500.0, rel_threshold: float = 0.01) -> tuple[pd.DataFrame, dict]:
    """Map every company in a credit-line table; returns snapshots and a report.

    Companies without the full lookback are skipped in strict mode and listed
    in the report. Unrecognised categories are kept out of the features but
    counted as pass-through lines.
    """
    bad_cat = ~lines["category"].isin(CATEGORIES)
    if bad_cat.any():
        raise ValueError(f"unknown categories: {sorted(set(lines.loc[bad_cat, 'category']))}")
    amounts = lines[["granted", "used", "past_due_amount"]].to_numpy(dtype=float)
    if (amounts < 0).any() or np.isnan(amounts).any():
        raise ValueError("credit-line amounts must be non-negative numbers")
    month = lines["reference_month"].str.slice(0, 7).map(month_index).to_numpy()
    npl_keys = set()
    if phenomena is not None and len(phenomena):
        hit = phenomena[phenomena["code"].astype(str).str.zfill(9) == NPL_PHENOMENON]
        npl_keys = set(zip(hit["company_id"].astype(str), hit["reference_month"].str.slice(0, 7)))
    rows, skipped = [], []
    ids = lines["company_id"].astype(str).to_numpy()
    order = np.lexsort((month, ids))
    ids, month = ids[order], month[order]
    cat = lines["category"].to_numpy()[order]
    status = lines["status_code"].to_numpy(dtype=np.int64)[order]
    granted, used, past_due = (amounts[order, j] for j in range(3))
    long_term = (lines["original_duration"].to_numpy() == "gt5y")[order]
    bounds = np.flatnonzero(np.r_[True, ids[1:] != ids[:-1], True])
    passthrough = int((~np.isin(cat, ("maturity_risk", "revocable_risk"))).sum())
    for a, b in zip(bounds[:-1], bounds[1:]):
        cid = ids[a]
        ref = month_index(reference_month) if reference_month else int(month[b - 1])
        first = ref - LOOKBACK_MONTHS + 1
        sel = slice(a, b)
        mm = month[sel]
        if int(mm.min()) > first and strict:
            skipped.append(cid)
            continue
        inside = (mm >= first) & (mm <= ref)
        start = max(first, int(mm.min()))
        chunk = _Lines(month=(mm - start)[inside], category=cat[sel][inside], status=status[sel][inside],
                       granted=granted[sel][inside], used=used[sel][inside], past_due=past_due[sel][inside],
                       long_term=long_term[sel][inside])
        npl = (cid, month_label(ref)) in npl_keys
        values = _map_lines(chunk, ref - start + 1, npl, abs_threshold, rel_threshold)
        rows.append(_assemble(cid, month_label(ref), values, lookups).to_row())
    if skipped:
        log.warning("%d companies lack %d months of history and were skipped", len(skipped), LOOKBACK_MONTHS)
    frame = pd.DataFrame(rows, columns=list(SNAPSHOT_COLUMNS))
    report = {"companies": len(rows), "skipped_insufficient_history": skipped,
              "passthrough_lines": passthrough, "proxy_features": list(PROXY_FEATURES)}
    return frame, report


BATTERY_FEATURES = (
    "closed_nrt", "recent_contracts_3m", "worst_payment_delay_6m", "past_due_0_contracts",
    "nrt_present", "rt_balance", "nrt_balance", "max_past_due_days_6m",
)


def comparison_columns(snapshots: pd.DataFrame) -> pd.DataFrame:
    """Raw snapshot fields plus derived KPIs, indexed by company."""
    frame = pd.concat([snapshots.reset_index(drop=True), kpi_frame(snapshots.reset_index(drop=True))], axis=1)
    return frame.set_index(frame["company_id"].astype(str))


def build_pairs(cr: pd.DataFrame, bureau: pd.DataFrame, features=BATTERY_FEATURES) -> pd.DataFrame:
    """Join CR-mapped and bureau snapshots into ``<feature>_cr`` / ``<feature>_bureau`` columns."""
    a = comparison_columns(cr)
    b = comparison_columns(bureau)
    known = set(b.index)
    common = [c for c in a.index if c in known]
    if not common:
        raise ValueError("no companies shared between CR and bureau snapshots")
    out = pd.DataFrame({"company_id": common})
    for f in features:
        out[f"{f}_cr"] = a.loc[common, f].to_numpy(dtype=float)
        out[f"{f}_bureau"] = b.loc[common, f].to_numpy(dtype=float)
    return out
