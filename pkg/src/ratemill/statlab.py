"""Paired tests, rank correlations and FDR control used to validate the
Central Credit Register feature mapping against bureau data."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd
from scipy import stats
from scipy.stats import rankdata

EXACT_LIMIT = 25


@dataclass
class TestReport:
    name: str
    statistic: float
    p_raw: float
    method: str
    p_adjusted: float | None = None
    decision: str = "fail_to_reject"
    n: int = 0

    __test__ = False  # not a pytest class

    def decide(self, alpha: float = 0.05) -> "TestReport":
        p = self.p_adjusted if self.p_adjusted is not None else self.p_raw
        self.decision = "reject_null" if p < alpha else "fail_to_reject"
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def _signed_rank_null(doubled_ranks: np.ndarray) -> np.ndarray:
    """Exact null distribution of 2*W+ over all sign assignments (counts per value)."""
    total = int(doubled_ranks.sum())
    dist = np.zeros(total + 1)
    dist[0] = 1.0
    for r in doubled_ranks.astype(int):
        shifted = np.zeros_like(dist)
        shifted[r:] = dist[: total + 1 - r]
        dist = dist + shifted
    return dist


def wilcoxon_one_sided(x, y, name: str = "wilcoxon", alternative: str = "greater",
                       exact_limit: int = EXACT_LIMIT) -> TestReport:
    """Paired signed-rank test of ``x`` tending to exceed ``y`` (or the reverse with
    ``alternative='less'``). Zero differences are dropped, ties get average ranks."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("x and y must be paired")
    d = x - y
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise ValueError("all pairs tied")
    if alternative == "less":
        d = -d
    elif alternative != "greater":
        raise ValueError("alternative must be 'greater' or 'less'")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if n <= exact_limit:
        doubled = np.rint(2 * ranks).astype(int)
        dist = _signed_rank_null(doubled)
        observed = int(round(2 * w_plus))
        p = float(dist[observed:].sum() / dist.sum())
        method = "wilcoxon_exact"
    else:
        mean = n * (n + 1) / 4.0
        _, tie_counts = np.unique(np.abs(d), return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts ** 3 - tie_counts) / 48.0
        z = (w_plus - mean - 0.5) / math.sqrt(var)
        p = float(stats.norm.sf(z))
        method = "wilcoxon_normal"
    return TestReport(name, w_plus, min(1.0, p), method, n=n)


def mcnemar(x, y, name: str = "mcnemar", alternative: str = "two-sided",
            exact_limit: int = EXACT_LIMIT) -> TestReport:
    """McNemar test on paired binaries; b counts (x=1, y=0), c counts (x=0, y=1).

    ``alternative='greater'`` tests whether x=1 occurs more often than y=1.
    """
    x = np.asarray(x).astype(bool)
    y = np.asarray(y).astype(bool)
    b = int((x & ~y).sum())
    c = int((~x & y).sum())
    m = b + c
    if m == 0:
        raise ValueError("no discordant pairs")
    if m < exact_limit:
        if alternative == "two-sided":
            p = min(1.0, 2.0 * stats.binom.cdf(min(b, c), m, 0.5))
        elif alternative == "greater":
            p = float(stats.binom.sf(b - 1, m, 0.5))
        elif alternative == "less":
            p = float(stats.binom.cdf(b, m, 0.5))
        else:
            raise ValueError("unknown alternative")
        return TestReport(name, float(min(b, c)), float(p), "mcnemar_exact", n=m)
    chi2 = (abs(b - c) - 1.0) ** 2 / m
    if alternative == "two-sided":
        p = float(stats.chi2.sf(chi2, 1))
    else:
        z = math.copysign(math.sqrt(chi2), b - c) if b != c else 0.0
        p = float(stats.norm.sf(z) if alternative == "greater" else stats.norm.cdf(z))
    return TestReport(name, float(chi2), p, "mcnemar_chi2", n=m)


def spearman_rho(x, y, name: str = "spearman") -> TestReport:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(x)
    if n < 3 or len(y) != n:
        raise ValueError("need at least 3 paired observations")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise ValueError("constant input")
    rho = float(np.corrcoef(rankdata(x), rankdata(y))[0, 1])
    rho = max(-1.0, min(1.0, rho))
    if abs(rho) == 1.0:
        p = 0.0
    else:
        t = rho * math.sqrt((n - 2) / (1 - rho * rho))
        p = float(2 * stats.t.sf(abs(t), n - 2))
    return TestReport(name, rho, p, "spearman", n=n)


def _pair_counts(x, y, chunk: int = 2048):
    """Concordant minus discordant pairs, and pairs tied in x, in y, in both."""
    n = len(x)
    s = tx = ty = txy = 0
    for start in range(0, n, chunk):
        xi = x[start:start + chunk, None]
        yi = y[start:start + chunk, None]
        idx = np.arange(start, min(n, start + chunk))[:, None]
        upper = np.arange(n)[None, :] > idx
        dx = np.sign(x[None, :] - xi)
        dy = np.sign(y[None, :] - yi)
        s += int(np.sum((dx * dy)[upper]))
        zx = (dx == 0) & upper
        zy = (dy == 0) & upper
        tx += int(zx.sum())
        ty += int(zy.sum())
        txy += int((zx & zy).sum())
    return s, tx, ty, txy


def kendall_tau(x, y, name: str = "kendall") -> TestReport:
    """Kendall tau-b with a tie-corrected normal approximation for the p-value."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(x)
    if n < 2 or len(y) != n:
        raise ValueError("need at least 2 paired observations")
    s, tx, ty, _ = _pair_counts(x, y)
    n0 = n * (n - 1) // 2
    if tx == n0 or ty == n0:
        raise ValueError("all values tied")
    tau = s / math.sqrt((n0 - tx) * (n0 - ty))
    _, cx = np.unique(x, return_counts=True)
    _, cy = np.unique(y, return_counts=True)
    v0 = n * (n - 1) * (2 * n + 5)
    vt = float(np.sum(cx * (cx - 1.0) * (2 * cx + 5)))
    vu = float(np.sum(cy * (cy - 1.0) * (2 * cy + 5)))
    v1 = float(np.sum(cx * (cx - 1.0))) * float(np.sum(cy * (cy - 1.0)))
    v2 = float(np.sum(cx * (cx - 1.0) * (cx - 2))) * float(np.sum(cy * (cy - 1.0) * (cy - 2)))
    var = (v0 - vt - vu) / 18.0 + v1 / (2.0 * n * (n - 1))
    if n > 2:
        var += v2 / (9.0 * n * (n - 1) * (n - 2))
    p = float(2 * stats.norm.sf(abs(s) / math.sqrt(var))) if var > 0 else 1.0
    return TestReport(name, float(tau), min(1.0, p), "kendall", n=n)


def by_adjust(p_values) -> np.ndarray:
    """Benjamini-Yekutieli step-up adjusted p-values, in input order."""
    p = np.asarray(p_values, dtype=np.float64)
    if p.size == 0:
        return p.copy()
    if np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    cm = float(np.sum(1.0 / np.arange(1, m + 1)))
    order = np.argsort(p, kind="mergesort")
    ranked = p[order] * m * cm / np.arange(1, m + 1)
    adjusted = np.minimum.accumulate(ranked[::-1])[::-1]
    out = np.empty(m)
    out[order] = np.minimum(adjusted, 1.0)
    return out


def by_reject(p_values, q: float = 0.05) -> np.ndarray:
    return by_adjust(p_values) <= q


TESTS = {"wilcoxon", "mcnemar", "spearman", "kendall"}


def run_battery(pairs: pd.DataFrame, battery: list[dict], alpha: float = 0.05) -> list[TestReport]:
    """Run each configured test on ``<feature>_cr`` vs ``<feature>_bureau`` columns
    and adjust the whole family with Benjamini-Yekutieli."""
    reports = []
    for entry in battery:
        feature = entry["feature"]
        kind = entry.get("test", "wilcoxon")
        alternative = entry.get("alternative", "greater")
        cr = pairs[f"{feature}_cr"].to_numpy(dtype=np.float64)
        bureau = pairs[f"{feature}_bureau"].to_numpy(dtype=np.float64)
        if kind == "wilcoxon":
            rep = wilcoxon_one_sided(cr, bureau, feature, alternative)
        elif kind == "mcnemar":
            rep = mcnemar(cr > 0, bureau > 0, feature, alternative)
        elif kind == "spearman":
            rep = spearman_rho(cr, bureau, feature)
        elif kind == "kendall":
            rep = kendall_tau(cr, bureau, feature)
        else:
            raise ValueError(f"unknown test {kind!r}")
        reports.append(rep)
    adjusted = by_adjust([r.p_raw for r in reports])
    for rep, adj in zip(reports, adjusted):
        rep.p_adjusted = float(max(adj, rep.p_raw))
        rep.decide(alpha)
    return reports


def battery_frame(reports: list[TestReport]) -> pd.DataFrame:
    return pd.DataFrame({
        "feature": [r.name for r in reports],
        "test": [r.method for r in reports],
        "statistic": [r.statistic for r in reports],
        "p_value": [r.p_raw for r in reports],
        "adjusted_p_value": [r.p_adjusted for r in reports],
        "result": ["Reject Null" if r.decision == "reject_null" else "Fail to Reject" for r in reports],
    })


DEFAULT_BATTERY = [
    {"feature": "closed_nrt", "test": "mcnemar", "alternative": "greater"},
    {"feature": "recent_contracts_3m", "test": "mcnemar", "alternative": "greater"},
    {"feature": "worst_payment_delay_6m", "test": "wilcoxon", "alternative": "greater"},
    {"feature": "past_due_0_contracts", "test": "wilcoxon", "alternative": "greater"},
    {"feature": "nrt_present", "test": "mcnemar", "alternative": "greater"},
    {"feature": "rt_balance", "test": "wilcoxon", "alternative": "greater"},
    {"feature": "nrt_balance", "test": "wilcoxon", "alternative": "greater"},
    {"feature": "max_past_due_days_6m", "test": "wilcoxon", "alternative": "greater"},
]


class HorizonGapError(ValueError):
    def __init__(self, companies):
        self.companies = list(companies)
        shown = ", ".join(self.companies[:20]) + (" ..." if len(self.companies) > 20 else "")
        super().__init__(f"horizon not covered for {len(self.companies)} companies: {shown}")


@dataclass
class BacktestResult:
    report: "object"
    confusion_counts: list
    n: int
    excluded: list
    scores: pd.DataFrame

    def to_dict(self) -> dict:
        out = self.report.to_dict()
        out.update({"confusion_counts": self.confusion_counts, "n": self.n, "excluded": self.excluded,
                    "normalized_confusion": self.report.normalized_confusion()})
        return out


def backtest(pipeline, snapshots: pd.DataFrame, statuses: pd.DataFrame, threshold: float | None = None,
             beta: float | None = None, allow_gaps: bool = False) -> BacktestResult:
    """Label ``snapshots`` from the following 12 months of ``statuses`` and score them.

    Rows whose horizon is incomplete raise unless ``allow_gaps``, in which
    case they are dropped and listed in the result.
    """
    from .boster import report as metric_report
    from .datamodel import derive_targets

    labelled = derive_targets(snapshots.drop(columns=["target"], errors="ignore"), statuses)
    gaps = labelled.loc[~labelled["covered"], "company_id"].astype(str).tolist()
    if gaps and not allow_gaps:
        raise HorizonGapError(gaps)
    labelled = labelled[labelled["covered"]].reset_index(drop=True)
    raw = pipeline.raw_scores(labelled)
    y = labelled["target"].to_numpy().astype(int)
    thr = pipeline.threshold if threshold is None else threshold
    rep = metric_report(raw, y, thr, pipeline.beta if beta is None else beta)
    scores = pd.DataFrame({"company_id": labelled["company_id"].astype(str), "reference_date": labelled["reference_date"],
                           "score": raw, "pd": pipeline.pds(raw), "target": y})
    return BacktestResult(rep, rep.confusion, len(y), gaps, scores)
