"""Synthetic companies with a bi-normal latent risk factor.

Every company owns a set of credit lines over the 13 months ending at its
reference month. The credit register (CR) sees all of them; the bureau sees
each line independently with probability ``1 - cr_noise``. Bureau snapshots
are computed from the visible lines, so each bureau quantity is bounded by
its CR counterpart. Defaults are drawn first and the latent factor is drawn
conditionally, ``u | D ~ N(latent_signal * D, 1)``, which makes the AUC of
the ideal score ``Phi(latent_signal / sqrt(2))``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import stats

from .datamodel import SECTOR_COLUMNS, SNAPSHOT_COLUMNS, month_label

CODES_180 = (827, 831, 125, 129, 133, 137)
CODES_90 = (826, 830, 124, 128, 132, 136)
OTHER_CODES = (100, 110, 120, 200, 300)
NPL_PHENOMENON = "000551000"
LEVEL_DAYS = np.array([0, 30, 90, 180])
WINDOW = 13  # months t-12 .. t
STATUS_COLUMNS = ("company_id", "reference_date", "special_status", "def_no",
                  "max_past_due_days_6m", "worst_payment_delay_6m")

# line kinds
RT_START, NRT_START, RT_CLOSED, NRT_CLOSED, RT_OPENED = range(5)


def theoretical_auc(latent_signal: float) -> float:
    return float(stats.norm.cdf(latent_signal / math.sqrt(2.0)))


def signal_for_auc(auc: float) -> float:
    if not 0.5 <= auc < 1.0:
        raise ValueError("auc must lie in [0.5, 1)")
    return float(math.sqrt(2.0) * stats.norm.ppf(auc))


@dataclass
class GeneratorConfig:
    n_companies: int = 10000
    vintages: list[int] = field(default_factory=lambda: [2018, 2019, 2020, 2021, 2022])
    latent_signal: float = signal_for_auc(0.90)
    base_default_rate: float = 0.035
    seed: int = 0
    cr_noise: float = 0.35
    reference_month: int = 3
    n_cr_companies: int = 2000
    private_share: float = 0.02
    zero_contract_share: float = 0.01
    prior_insolvent_share: float = 0.01
    rt_open_rate: float = 1.2

    def validate(self) -> "GeneratorConfig":
        if self.n_companies < 1 or not self.vintages:
            raise ValueError("need at least one company and one vintage")
        if self.latent_signal < 0:
            raise ValueError("latent_signal must be >= 0")
        if not 0 < self.base_default_rate < 1:
            raise ValueError("base_default_rate must lie in (0, 1)")
        if not 0 <= self.cr_noise < 1:
            raise ValueError("cr_noise must lie in [0, 1)")
        if not 1 <= self.reference_month <= 12:
            raise ValueError("reference_month must be a calendar month")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        if "theoretical_auc" in d:
            d["latent_signal"] = signal_for_auc(float(d.pop("theoretical_auc")))
        known = cls.__dataclass_fields__
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown generator settings: {sorted(unknown)}")
        return cls(**d).validate()

    @classmethod
    def from_json(cls, path) -> "GeneratorConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class SyntheticData:
    snapshots: pd.DataFrame      # bureau reference rows
    statuses: pd.DataFrame       # bureau horizon rows (trigger columns only)
    prior: pd.DataFrame          # company_id, year, special_status
    truth: pd.DataFrame          # company_id, reference_date, default, latent
    cr_lines: pd.DataFrame
    cr_phenomena: pd.DataFrame
    lookups: dict[str, pd.DataFrame]
    config: GeneratorConfig

    def cr_cohort(self) -> np.ndarray:
        return self.cr_phenomena.attrs.get("cohort", np.array([], dtype=object))


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def _within(counts: np.ndarray) -> np.ndarray:
    """Position of each repeated element inside its group."""
    total = int(counts.sum())
    starts = np.cumsum(counts) - counts
    return np.arange(total) - np.repeat(starts, counts)


def _levels(rng, u, rate_intercept, present):
    """Monthly delinquency level (0..3) per company over the window."""
    n = len(u)
    has = (rng.random(n) < _sigmoid(rate_intercept + 1.0 * u)) & present
    start = rng.integers(0, WINDOW, n)
    length = 1 + rng.poisson(1.5, n)
    severity = 0.8 * u + rng.normal(size=n)
    level = 1 + (severity > 1.2).astype(int) + (severity > 2.0).astype(int)
    m = np.arange(WINDOW)[None, :]
    active = has[:, None] & (m >= start[:, None]) & (m < (start + length)[:, None])
    return np.where(active, level[:, None], 0).astype(np.int8)


def generate(config: GeneratorConfig) -> SyntheticData:
    cfg = config.validate()
    rng = np.random.default_rng(cfg.seed)
    years = np.asarray(sorted(cfg.vintages))
    N = cfg.n_companies
    vintage = years[np.arange(N) * len(years) // N]
    serial = _within(np.bincount(np.searchsorted(years, vintage), minlength=len(years)))
    ids = np.array([f"{y}-{s:06d}" for y, s in zip(vintage, serial)], dtype=object)
    ref_idx = vintage * 12 + cfg.reference_month - 1

    default = rng.random(N) < cfg.base_default_rate
    u = rng.normal(size=N) + cfg.latent_signal * default

    private = rng.random(N) < cfg.private_share
    zero = rng.random(N) < cfg.zero_contract_share
    prior_insolvent = rng.random(N) < cfg.prior_insolvent_share

    # line counts per kind
    has_rt = (rng.random(N) < 0.85) & ~zero
    has_nrt = (rng.random(N) < 0.80) & ~zero
    has_nrt |= ~has_rt & ~zero
    counts = np.zeros((5, N), dtype=np.int64)
    counts[RT_START] = has_rt * (1 + np.minimum(rng.poisson(0.8, N), 4))
    counts[NRT_START] = has_nrt * (1 + np.minimum(rng.poisson(0.6, N), 4))
    counts[RT_CLOSED] = has_rt * np.minimum(rng.poisson(0.15, N), 3)
    counts[NRT_CLOSED] = has_nrt * np.minimum(rng.poisson(0.25 * np.exp(0.3 * np.clip(u, -3, 3))), 3)
    counts[RT_OPENED] = (~zero) * np.minimum(rng.poisson(cfg.rt_open_rate, N), 4)

    comp = np.concatenate([np.repeat(np.arange(N), counts[k]) for k in range(5)])
    kind = np.concatenate([np.full(int(counts[k].sum()), k) for k in range(5)])
    pos = np.concatenate([_within(counts[k]) for k in range(5)])
    order = np.lexsort((pos, kind, comp))
    comp, kind, pos = comp[order], kind[order], pos[order]
    M = len(comp)
    cat = np.isin(kind, (NRT_START, NRT_CLOSED)).astype(np.int8)  # 0 maturity, 1 revocable
    anchor = np.isin(kind, (RT_START, NRT_START)) & (pos == 0)

    open_m = np.zeros(M, dtype=np.int64)
    close_m = np.full(M, WINDOW, dtype=np.int64)
    opened = kind == RT_OPENED
    open_m[opened] = rng.integers(1, WINDOW, int(opened.sum()))
    closed = np.isin(kind, (RT_CLOSED, NRT_CLOSED))
    close_m[closed] = rng.integers(1, WINDOW, int(closed.sum()))
    # a category never opens and closes a line in the same month
    opening_keys = set((comp[opened] * 16 + open_m[opened]).tolist())
    rt_closed = np.flatnonzero(kind == RT_CLOSED)
    for _ in range(WINDOW):
        clash = np.array([(comp[i] * 16 + close_m[i]) in opening_keys for i in rt_closed], dtype=bool)
        if not clash.any():
            break
        close_m[rt_closed[clash]] = close_m[rt_closed[clash]] % (WINDOW - 1) + 1

    mortgage = (cat == 0) & (rng.random(M) < np.where(opened, 0.10, 0.25))
    rt_amount = np.exp(rng.normal(10.6, 0.9, M)) * np.where(mortgage, 3.0, 1.0)
    nrt_amount = np.exp(rng.normal(9.6 - 0.15 * u[comp], 0.8))
    granted = np.round(np.maximum(np.where(cat == 0, rt_amount, nrt_amount), 5000.0))
    # the anchor line is the largest of its category so its arrears are always material
    key = comp * 2 + cat
    group_max = np.zeros(2 * N)
    np.maximum.at(group_max, key, granted)
    granted = np.where(anchor, group_max[key], granted)
    visible = rng.random(M) >= cfg.cr_noise

    draw = _sigmoid(-0.6 + 1.0 * u + 0.5 * rng.normal(size=N))
    used = np.where(cat == 1, np.round(draw[comp] * granted, 2), granted)
    pd_frac = rng.uniform(0.25, 0.6, N)
    rt_level = _levels(rng, u, -0.8, has_rt)
    nrt_level = _levels(rng, u, -0.8, has_nrt)

    legal = np.where(rng.random(N) < _sigmoid(-1.5 + 0.5 * u), "DI",
                     np.where(rng.random(N) < 0.15, "SP", "SC")).astype(object)
    special = np.where(rng.random(N) < _sigmoid(-4.0 + 0.7 * u), "dispute", "none").astype(object)
    protest = rng.random(N) < _sigmoid(-3.2 + 0.9 * u)
    sector = rng.normal(size=(N, 5))
    sector[:, 0] = 0.7 * u + 0.6 * sector[:, 0]
    sector = np.round(sector, 6)

    # ---- bureau reference rows from the visible lines ---------------------
    line_level = np.where(anchor, np.where(cat == 0, rt_level[comp, :].T, nrt_level[comp, :].T), 0).T
    present12 = (open_m <= WINDOW - 1) & (close_m >= WINDOW)
    lvl12 = line_level[:, WINDOW - 1]
    pd_amount12 = np.where(lvl12 == 1, np.round(pd_frac[comp] * granted, 2),
                           np.where(lvl12 >= 2, granted, 0.0))
    vis_now = visible & present12

    def total(mask, values):
        return np.bincount(comp[mask], weights=values[mask], minlength=N)

    def count(mask):
        return np.bincount(comp[mask], minlength=N)

    last6 = LEVEL_DAYS[line_level[:, WINDOW - 6:]].max(axis=1)
    npl12 = (line_level[:, 1:] == 3).any(axis=1)
    vis_anchor = visible & anchor
    snap = pd.DataFrame({
        "company_id": ids,
        "reference_date": [month_label(int(t)) for t in ref_idx],
        "legal_type": legal,
        "special_status": special,
    })
    for j, col in enumerate(SECTOR_COLUMNS):
        snap[col] = sector[:, j]
    snap["rt_mortgages_balance"] = total(vis_now & (cat == 0) & mortgage, granted)
    snap["rt_non_mortgages_balance"] = total(vis_now & (cat == 0) & ~mortgage, granted)
    snap["nrt_balance"] = total(vis_now & (cat == 1), granted)
    snap["nrt_used"] = np.round(total(vis_now & (cat == 1), used), 2)
    snap["nrt_past_due_balance"] = np.round(total(vis_now & (cat == 1), pd_amount12), 2)
    rt_days = np.zeros(N, dtype=np.int64)
    np.maximum.at(rt_days, comp[vis_anchor & (cat == 0)], last6[vis_anchor & (cat == 0)])
    nrt_days = np.zeros(N, dtype=np.int64)
    np.maximum.at(nrt_days, comp[vis_anchor & (cat == 1)], last6[vis_anchor & (cat == 1)])
    snap["worst_payment_delay_6m"] = rt_days // 30
    snap["max_past_due_days_6m"] = nrt_days
    snap["def_no"] = count(vis_anchor & npl12)
    snap["past_due_0_contracts"] = count(vis_now & (pd_amount12 == 0))
    snap["past_due_0_contracts_12m"] = count(visible & closed)
    snap["nrt_contracts"] = count(vis_now & (cat == 1))
    snap["nrt_contracts_12m"] = count(visible & closed & (cat == 1))
    snap["contracts_3m"] = count(visible & opened & (open_m >= WINDOW - 3))
    snap["contracts_4_12m"] = count(visible & opened & (open_m < WINDOW - 3))
    snap["protest_present"] = protest
    snap["is_private_individual"] = private
    snap = snap[list(SNAPSHOT_COLUMNS)]

    statuses = _horizon_rows(rng, ids, ref_idx, default, special)
    prior = pd.DataFrame({"company_id": ids, "year": vintage - 1,
                          "special_status": np.where(prior_insolvent, "insolvency", "none")})
    truth = pd.DataFrame({"company_id": ids, "reference_date": snap["reference_date"],
                          "default": default.astype(int), "latent": np.round(u, 6)})

    # ---- CR emission for a cohort of the latest vintage ------------------
    eligible = np.flatnonzero((vintage == years[-1]) & ~private & ~zero & ~prior_insolvent)
    cohort = eligible[: cfg.n_cr_companies]
    in_cohort = np.zeros(N, dtype=bool)
    in_cohort[cohort] = True
    cr_lines = _cr_rows(rng, ids, ref_idx, in_cohort, comp, cat, mortgage, granted, used,
                        open_m, close_m, line_level, pd_frac, opened)
    npl_company = np.zeros(N, dtype=bool)
    npl_company[comp[anchor & npl12]] = True
    hit = cohort[npl_company[cohort]]
    phenomena = pd.DataFrame({"company_id": ids[hit],
                              "reference_month": [month_label(int(t)) for t in ref_idx[hit]],
                              "code": NPL_PHENOMENON})
    phenomena.attrs["cohort"] = ids[cohort]
    lookups = {
        "protest": pd.DataFrame({"company_id": ids[cohort], "protest_present": protest[cohort]}),
        "legal_type": pd.DataFrame({"company_id": ids[cohort], "legal_type": legal[cohort]}),
        "special_status": pd.DataFrame({"company_id": ids[cohort], "special_status": special[cohort]}),
        "sector": pd.concat([pd.DataFrame({"company_id": ids[cohort]}),
                             pd.DataFrame(sector[cohort], columns=list(SECTOR_COLUMNS))], axis=1),
    }
    return SyntheticData(snap, statuses, prior, truth, cr_lines, phenomena, lookups, cfg)


def _horizon_rows(rng, ids, ref_idx, default, special) -> pd.DataFrame:
    """Twelve status rows after each reference month; defaulters trigger once."""
    N = len(ids)
    H = 12
    month = ref_idx[:, None] + np.arange(1, H + 1)[None, :]
    status = np.where(special == "dispute", "dispute", "none").astype(object)
    status = np.repeat(status[:, None], H, axis=1)
    def_no = np.zeros((N, H), dtype=np.int64)
    days = np.where(rng.random((N, H)) < 0.03, rng.choice([30, 60], (N, H)), 0)
    delay = np.where(rng.random((N, H)) < 0.03, rng.choice([1, 2], (N, H)), 0)
    hit = rng.integers(0, H, N)
    kind = rng.integers(0, 5, N)
    rows = np.flatnonzero(default)
    h = hit[rows]
    k = kind[rows]
    status[rows[k == 0], h[k == 0]] = "npl"
    status[rows[k == 1], h[k == 1]] = "insolvency"
    def_no[rows[k == 2], h[k == 2]] = 1
    days[rows[k == 3], h[k == 3]] = 120
    delay[rows[k == 4], h[k == 4]] = 4
    labels = np.array([month_label(int(t)) for t in range(int(month.min()), int(month.max()) + 1)], dtype=object)
    return pd.DataFrame({
        "company_id": np.repeat(ids, H),
        "reference_date": labels[(month - month.min()).ravel()],
        "special_status": status.ravel(),
        "def_no": def_no.ravel(),
        "max_past_due_days_6m": days.ravel(),
        "worst_payment_delay_6m": delay.ravel(),
    })


def _cr_rows(rng, ids, ref_idx, in_cohort, comp, cat, mortgage, granted, used, open_m, close_m,
             line_level, pd_frac, opened) -> pd.DataFrame:
    sel = np.flatnonzero(in_cohort[comp])
    lines = []
    for m in range(WINDOW):
        here = sel[(open_m[sel] <= m) & (close_m[sel] > m)]
        lvl = line_level[here, m]
        g = granted[here]
        pd_amt = np.where(lvl == 1, np.round(pd_frac[comp[here]] * g, 2), np.where(lvl >= 2, g, 0.0))
        code = np.where(lvl == 3, rng.choice(CODES_180, len(here)),
                        np.where(lvl == 2, rng.choice(CODES_90, len(here)), rng.choice(OTHER_CODES, len(here))))
        revocable = cat[here] == 1
        long = mortgage[here]
        lines.append(pd.DataFrame({
            "_line": here,
            "_m": m,
            "company_id": ids[comp[here]],
            "reference_month": [month_label(int(t)) for t in ref_idx[comp[here]] - (WINDOW - 1) + m],
            "category": np.where(revocable, "revocable_risk", "maturity_risk"),
            "status_code": code,
            "granted": g,
            "used": used[here],
            "past_due_amount": pd_amt,
            "original_duration": np.where(revocable, "not_applicable",
                                          np.where(long, "gt5y", np.where(opened[here], "lt1y", "y1to5"))),
            "remaining_duration": np.where(revocable, "not_applicable", np.where(long, "gt1y", "lt1y")),
        }))
    # self-liquidating lines pass through the bridge untouched
    cohort = np.flatnonzero(in_cohort)
    extra = cohort[rng.random(len(cohort)) < 0.3]
    amount = np.round(np.exp(rng.normal(9.0, 0.7, len(extra))))
    for m in range(WINDOW):
        lines.append(pd.DataFrame({
            "_line": -1 - extra, "_m": m,
            "company_id": ids[extra],
            "reference_month": [month_label(int(t)) for t in ref_idx[extra] - (WINDOW - 1) + m],
            "category": "self_liquidating", "status_code": 100, "granted": amount, "used": 0.0,
            "past_due_amount": 0.0, "original_duration": "lt1y", "remaining_duration": "lt1y",
        }))
    frame = pd.concat(lines, ignore_index=True)
    frame = frame.sort_values(["company_id", "_m", "_line"], kind="mergesort")
    return frame.drop(columns=["_line", "_m"]).reset_index(drop=True)


def write(data: SyntheticData, out_dir) -> dict[str, str]:
    """Write every table as CSV; returns name -> path."""
    out = Path(out_dir)
    (out / "lookups").mkdir(parents=True, exist_ok=True)
    paths = {
        "snapshots": out / "snapshots.csv",
        "statuses": out / "statuses.csv",
        "prior": out / "prior.csv",
        "truth": out / "truth.csv",
        "cr_lines": out / "cr_lines.csv",
        "cr_phenomena": out / "cr_phenomena.csv",
    }
    data.snapshots.to_csv(paths["snapshots"], index=False)
    data.statuses.to_csv(paths["statuses"], index=False)
    data.prior.to_csv(paths["prior"], index=False)
    data.truth.to_csv(paths["truth"], index=False)
    data.cr_lines.to_csv(paths["cr_lines"], index=False)
    data.cr_phenomena.to_csv(paths["cr_phenomena"], index=False)
    for name, frame in data.lookups.items():
        paths[f"lookup_{name}"] = out / "lookups" / f"{name}.csv"
        frame.to_csv(paths[f"lookup_{name}"], index=False)
    cohort = data.cr_cohort()
    paths["cr_statuses"] = out / "cr_statuses.csv"
    data.statuses[data.statuses["company_id"].isin(set(cohort))].to_csv(paths["cr_statuses"], index=False)
    paths["config"] = out / "generator_config.json"
    paths["config"].write_text(json.dumps(asdict(data.config), indent=2, sort_keys=True) + "\n")
    return {k: str(v) for k, v in paths.items()}
