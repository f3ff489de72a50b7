"""Snapshot records, default target construction, population filters and splits.

Records travel as pandas frames with the canonical column names below; the
dataclasses exist for single-record work and validation.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

LEGAL_TYPES = ("DI", "SC", "SP")
SPECIAL_STATUSES = ("none", "dispute", "insolvency", "npl")
DEFAULT_STATUSES = ("insolvency", "npl")
SECTOR_COLUMNS = tuple(f"sector_{i}" for i in range(5))

BALANCE_COLUMNS = (
    "rt_mortgages_balance",
    "rt_non_mortgages_balance",
    "nrt_balance",
    "nrt_used",
    "nrt_past_due_balance",
)
COUNT_COLUMNS = (
    "worst_payment_delay_6m",
    "max_past_due_days_6m",
    "def_no",
    "past_due_0_contracts",
    "past_due_0_contracts_12m",
    "nrt_contracts",
    "nrt_contracts_12m",
    "contracts_3m",
    "contracts_4_12m",
)
FLAG_COLUMNS = ("protest_present", "is_private_individual")
SNAPSHOT_COLUMNS = (
    ("company_id", "reference_date", "legal_type", "special_status")
    + SECTOR_COLUMNS
    + BALANCE_COLUMNS
    + COUNT_COLUMNS
    + FLAG_COLUMNS
)

# days of delay per unpaid monthly installment
INSTALLMENT_DAYS = 30
DEFAULT_DAYS = 90
HORIZON_MONTHS = 12


def month_index(month: str) -> int:
    """'YYYY-MM' -> months since year 0."""
    year, mon = month.split("-")[:2]
    m = int(mon)
    if not 1 <= m <= 12:
        raise ValueError(f"bad month {month!r}")
    return int(year) * 12 + m - 1


def month_label(index: int) -> str:
    return f"{index // 12:04d}-{index % 12 + 1:02d}"


def add_months(month: str, n: int) -> str:
    return month_label(month_index(month) + n)


@dataclass(frozen=True)
class CompanySnapshot:
    company_id: str
    reference_date: str
    legal_type: str = "SC"
    special_status: str = "none"
    sector_vector: tuple[float, ...] = (0.0, 0.0, 0.0, 0.0, 0.0)
    rt_mortgages_balance: float = 0.0
    rt_non_mortgages_balance: float = 0.0
    nrt_balance: float = 0.0
    nrt_used: float = 0.0
    nrt_past_due_balance: float = 0.0
    worst_payment_delay_6m: int = 0
    max_past_due_days_6m: int = 0
    def_no: int = 0
    past_due_0_contracts: int = 0
    past_due_0_contracts_12m: int = 0
    nrt_contracts: int = 0
    nrt_contracts_12m: int = 0
    contracts_3m: int = 0
    contracts_4_12m: int = 0
    protest_present: bool = False
    is_private_individual: bool = False

    def __post_init__(self):
        month_index(self.reference_date)
        if self.legal_type not in LEGAL_TYPES:
            raise ValueError(f"unknown legal_type {self.legal_type!r}")
        if self.special_status not in SPECIAL_STATUSES:
            raise ValueError(f"unknown special_status {self.special_status!r}")
        if len(self.sector_vector) != 5 or not all(math.isfinite(v) for v in self.sector_vector):
            raise ValueError("sector_vector must hold 5 finite numbers")
        for name in BALANCE_COLUMNS + COUNT_COLUMNS:
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.nrt_balance > 0 and self.nrt_used > self.nrt_balance:
            raise ValueError("nrt_used exceeds nrt_balance")

    @property
    def vintage(self) -> int:
        return month_index(self.reference_date) // 12

    def to_row(self) -> dict:
        row = {name: getattr(self, name) for name in SNAPSHOT_COLUMNS if not name.startswith("sector_")}
        row.update(zip(SECTOR_COLUMNS, self.sector_vector))
        return row

    @classmethod
    def from_row(cls, row: Mapping) -> "CompanySnapshot":
        kwargs = {}
        for name in SNAPSHOT_COLUMNS:
            if name.startswith("sector_"):
                continue
            if name in row:
                kwargs[name] = row[name]
        for name in COUNT_COLUMNS:
            if name in kwargs:
                kwargs[name] = int(kwargs[name])
        for name in FLAG_COLUMNS:
            if name in kwargs:
                kwargs[name] = bool(kwargs[name])
        kwargs["company_id"] = str(kwargs["company_id"])
        kwargs["sector_vector"] = tuple(float(row.get(c, 0.0)) for c in SECTOR_COLUMNS)
        return cls(**kwargs)


@dataclass(frozen=True)
class LabeledRecord:
    snapshot: CompanySnapshot
    target: int
    horizon_end: str = ""

    def __post_init__(self):
        if self.target not in (0, 1):
            raise ValueError("target must be 0 or 1")
        expected = add_months(self.snapshot.reference_date, HORIZON_MONTHS)
        if not self.horizon_end:
            object.__setattr__(self, "horizon_end", expected)
        elif self.horizon_end != expected:
            raise ValueError("horizon_end must be 12 months after reference_date")


@dataclass
class SplitDataset:
    train: pd.DataFrame
    test_oos: pd.DataFrame
    test_oot: pd.DataFrame
    split_seed: int
    oot_vintage: int = 0

    def manifest(self) -> dict:
        def part(df):
            n = len(df)
            return {"records": n, "positives": int(df["target"].sum()) if n else 0,
                    "target_rate": float(df["target"].mean()) if n else 0.0}

        return {
            "seed": self.split_seed,
            "oot_vintage": self.oot_vintage,
            "train": part(self.train),
            "test_oos": part(self.test_oos),
            "test_oot": part(self.test_oot),
        }


def _is_trigger(special_status, def_no, max_past_due_days, worst_delay):
    worst_days = np.asarray(worst_delay) * INSTALLMENT_DAYS
    return (
        np.isin(np.asarray(special_status), DEFAULT_STATUSES)
        | (np.asarray(def_no) >= 1)
        | (np.asarray(max_past_due_days) >= DEFAULT_DAYS)
        | (worst_days >= DEFAULT_DAYS)
    )


def derive_target(history: Sequence[CompanySnapshot], reference_date: str | None = None) -> int:
    """1 if any month of the 12-month horizon shows a default trigger.

    ``history`` holds the months strictly after ``reference_date``; when the
    reference is omitted it is taken as the month before the earliest entry.
    """
    if not history:
        raise ValueError("horizon not covered")
    months = sorted({month_index(s.reference_date) for s in history})
    start = month_index(reference_date) if reference_date else months[0] - 1
    wanted = set(range(start + 1, start + HORIZON_MONTHS + 1))
    if not wanted.issubset(months):
        raise ValueError("horizon not covered")
    in_horizon = [s for s in history if month_index(s.reference_date) in wanted]
    trig = _is_trigger(
        [s.special_status for s in in_horizon],
        [s.def_no for s in in_horizon],
        [s.max_past_due_days_6m for s in in_horizon],
        [s.worst_payment_delay_6m for s in in_horizon],
    )
    return int(trig.any())


def row_triggers(frame: pd.DataFrame) -> np.ndarray:
    return _is_trigger(
        frame["special_status"].to_numpy(),
        frame["def_no"].to_numpy(),
        frame["max_past_due_days_6m"].to_numpy(),
        frame["worst_payment_delay_6m"].to_numpy(),
    )


def derive_targets(reference: pd.DataFrame, monthly: pd.DataFrame) -> pd.DataFrame:
    """Vectorised derive_target for many reference rows at once.

    Returns ``reference`` with ``target`` and ``horizon_end`` columns plus a
    boolean ``covered``; uncovered rows keep target -1.
    """
    ref = reference.copy()
    ref["_t"] = ref["reference_date"].map(month_index)
    rows = pd.DataFrame({
        "company_id": monthly["company_id"].to_numpy(),
        "_m": monthly["reference_date"].map(month_index).to_numpy(),
        "_trig": row_triggers(monthly),
    }).drop_duplicates(["company_id", "_m"])
    keys = ref[["company_id", "_t"]].drop_duplicates()
    pairs = keys.merge(rows, on="company_id", how="inner")
    lag = pairs["_m"] - pairs["_t"]
    pairs = pairs[(lag >= 1) & (lag <= HORIZON_MONTHS)]
    agg = pairs.groupby(["company_id", "_t"], sort=False).agg(_n=("_m", "size"), _hit=("_trig", "max"))
    ref = ref.merge(agg.reset_index(), on=["company_id", "_t"], how="left")
    ref["covered"] = ref["_n"].fillna(0).to_numpy() == HORIZON_MONTHS
    hit = ref["_hit"].astype(float).fillna(0.0).to_numpy() > 0
    ref["target"] = np.where(ref["covered"], hit.astype(int), -1)
    ref["horizon_end"] = [month_label(t + HORIZON_MONTHS) for t in ref["_t"]]
    return ref.drop(columns=["_t", "_n", "_hit"])


def active_contracts(frame: pd.DataFrame) -> np.ndarray:
    return (
        (frame["rt_mortgages_balance"].to_numpy() > 0)
        | (frame["rt_non_mortgages_balance"].to_numpy() > 0)
        | (frame["nrt_balance"].to_numpy() > 0)
        | (frame["nrt_contracts"].to_numpy() > 0)
        | (frame["past_due_0_contracts"].to_numpy() > 0)
    )


def filter_population(records: pd.DataFrame, prior_year: Mapping[tuple[str, int], str]) -> tuple[pd.DataFrame, dict]:
    """Drop private individuals, companies without active contracts and
    companies that were insolvent one year before the record's vintage.

    ``prior_year`` maps (company_id, year) to that year's special status.
    Returns the retained frame and a small report of removal counts.
    """
    private = records["is_private_individual"].astype(bool).to_numpy()
    inactive = ~active_contracts(records)
    vintages = records["reference_date"].map(lambda m: month_index(m) // 12).to_numpy()
    missing = 0
    insolvent = np.zeros(len(records), dtype=bool)
    for i, (cid, year) in enumerate(zip(records["company_id"].to_numpy(), vintages)):
        status = prior_year.get((str(cid), int(year) - 1))
        if status is None:
            missing += 1
        elif status == "insolvency":
            insolvent[i] = True
    if missing:
        log.warning("%d records without prior-year status, treated as not insolvent", missing)
    keep = ~(private | inactive | insolvent)
    report = {
        "private_individuals": int(private.sum()),
        "no_active_contracts": int((inactive & ~private).sum()),
        "insolvent_prior_year": int((insolvent & ~private & ~inactive).sum()),
        "missing_prior_year": missing,
        "retained": int(keep.sum()),
    }
    return records[keep].reset_index(drop=True), report


def _canonical_order(records: pd.DataFrame) -> pd.DataFrame:
    return records.sort_values(["reference_date", "company_id"], kind="mergesort").reset_index(drop=True)


def split(records: pd.DataFrame, seed: int, test_fraction: float = 0.20) -> SplitDataset:
    """Latest vintage goes out-of-time; the rest is split stratified on target."""
    if len(records) == 0:
        raise ValueError("out-of-time split impossible")
    records = _canonical_order(records)
    vintages = records["reference_date"].map(lambda m: month_index(m) // 12).to_numpy()
    latest = int(vintages.max())
    if len(np.unique(vintages)) < 2:
        raise ValueError("out-of-time split impossible")
    oot = records[vintages == latest].reset_index(drop=True)
    rest = records[vintages != latest].reset_index(drop=True)
    rng = np.random.default_rng(seed)
    target = rest["target"].to_numpy()
    test_mask = np.zeros(len(rest), dtype=bool)
    for value in (0, 1):
        idx = np.flatnonzero(target == value)
        n_test = int(math.floor(test_fraction * len(idx) + 0.5))
        chosen = rng.permutation(idx)[:n_test]
        test_mask[chosen] = True
    return SplitDataset(
        train=rest[~test_mask].reset_index(drop=True),
        test_oos=rest[test_mask].reset_index(drop=True),
        test_oot=oot,
        split_seed=seed,
        oot_vintage=latest,
    )


def records_frame(records: Iterable[LabeledRecord]) -> pd.DataFrame:
    rows = []
    for rec in records:
        row = rec.snapshot.to_row()
        row["target"] = rec.target
        row["horizon_end"] = rec.horizon_end
        rows.append(row)
    return pd.DataFrame(rows, columns=list(SNAPSHOT_COLUMNS) + ["target", "horizon_end"])


@dataclass
class IngestReport:
    rows_read: int = 0
    reference_rows: int = 0
    uncovered_horizon: int = 0
    invalid_rows: int = 0
    missing_by_column: dict = field(default_factory=dict)
    filter: dict = field(default_factory=dict)


def read_snapshots(path, report: IngestReport | None = None) -> pd.DataFrame:
    """Read a snapshot CSV; empty numeric cells become 0 and are counted."""
    frame = pd.read_csv(path, dtype={"company_id": str, "reference_date": str}, keep_default_na=False, na_values=[""])
    return normalize_snapshots(frame, report)


def normalize_snapshots(frame: pd.DataFrame, report: IngestReport | None = None) -> pd.DataFrame:
    """Coerce column types. Missing numeric cells stay NaN (counted per
    column) so the sparse-column rule can see them; they become 0 once a
    column survives feature screening."""
    frame = frame.copy()
    if report is not None:
        report.rows_read += len(frame)
    missing_cols = [c for c in ("company_id", "reference_date") if c not in frame.columns]
    if missing_cols:
        raise ValueError(f"missing required columns: {missing_cols}")
    for col in SECTOR_COLUMNS + BALANCE_COLUMNS + COUNT_COLUMNS + FLAG_COLUMNS:
        if col not in frame.columns:
            frame[col] = np.nan
        values = frame[col]
        if values.dtype == object:
            values = values.replace({"True": 1, "False": 0, "true": 1, "false": 0})
        values = pd.to_numeric(values, errors="coerce")
        n_missing = int(values.isna().sum())
        if report is not None and n_missing:
            report.missing_by_column[col] = report.missing_by_column.get(col, 0) + n_missing
        frame[col] = values
    for col in FLAG_COLUMNS:
        frame[col] = frame[col].fillna(0).astype(bool)
    frame["company_id"] = frame["company_id"].astype(str)
    frame["reference_date"] = frame["reference_date"].astype(str).str.slice(0, 7)
    if "legal_type" not in frame.columns:
        frame["legal_type"] = "SC"
    frame["legal_type"] = frame["legal_type"].fillna("SC").astype(str)
    if "special_status" not in frame.columns:
        frame["special_status"] = "none"
    frame["special_status"] = frame["special_status"].fillna("none").replace("", "none").astype(str)
    return frame


def invalid_rows(frame: pd.DataFrame) -> np.ndarray:
    bad = np.zeros(len(frame), dtype=bool)
    for col in BALANCE_COLUMNS + COUNT_COLUMNS:
        bad |= frame[col].to_numpy() < 0
    nb = frame["nrt_balance"].to_numpy()
    bad |= (nb > 0) & (frame["nrt_used"].to_numpy() > nb)
    bad |= ~frame["legal_type"].isin(LEGAL_TYPES).to_numpy()
    bad |= ~frame["special_status"].isin(SPECIAL_STATUSES).to_numpy()
    bad |= np.isinf(frame[list(SECTOR_COLUMNS)].to_numpy(dtype=float)).any(axis=1)
    return bad


def read_prior(path) -> dict[tuple[str, int], str]:
    frame = pd.read_csv(path, dtype={"company_id": str}, keep_default_na=False)
    return {
        (str(c), int(y)): (s or "none")
        for c, y, s in zip(frame["company_id"], frame["year"], frame["special_status"])
    }


def ingest(snapshots: pd.DataFrame, prior: Mapping[tuple[str, int], str], seed: int,
           reference_month: int = 3, report: IngestReport | None = None,
           statuses: pd.DataFrame | None = None) -> SplitDataset:
    """Monthly rows -> labelled, filtered, split records.

    Reference rows are those whose calendar month equals ``reference_month``.
    Horizon evidence comes from ``statuses`` when given (any frame with the
    trigger columns), otherwise from the snapshot rows themselves.
    """
    report = report if report is not None else IngestReport()
    bad = invalid_rows(snapshots)
    if bad.any():
        log.warning("dropping %d rows violating snapshot invariants", int(bad.sum()))
        report.invalid_rows += int(bad.sum())
        snapshots = snapshots[~bad]
    months = snapshots["reference_date"].str.slice(5, 7).astype(int)
    reference = snapshots[months.to_numpy() == reference_month]
    labelled = derive_targets(reference, snapshots if statuses is None else statuses)
    report.reference_rows = len(labelled)
    report.uncovered_horizon = int((~labelled["covered"]).sum())
    if report.uncovered_horizon:
        log.warning("%d reference rows lack a full 12-month horizon and are skipped", report.uncovered_horizon)
    labelled = labelled[labelled["covered"]].drop(columns=["covered"]).reset_index(drop=True)
    filtered, report.filter = filter_population(labelled, prior)
    return split(filtered, seed)
