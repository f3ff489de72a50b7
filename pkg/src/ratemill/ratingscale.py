"""Rating master scale: differential-evolution binning of calibrated PDs and
out-of-time validation with a one-sided binomial test and the extended
traffic light."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import pandas as pd
from scipy.special import gammaln, logsumexp

log = logging.getLogger(__name__)

DEFAULT_LABELS = ("AAA", "AA", "A", "BBB", "BB", "B", "CCC", "CC", "C")
K_YELLOW = 0.84
K_ORANGE = 1.44
LOWER, UPPER = 1e-6, 1 - 1e-6


class InfeasibleScaleError(RuntimeError):
    pass


@dataclass
class DEParams:
    pop_per_dim: int = 15
    F: float = 0.8
    CR: float = 0.9
    max_generations: int = 500
    stagnation: int = 50
    penalty: float = 1e6
    polish: bool = True


@dataclass
class RatingScale:
    labels: list[str]
    boundaries: list[float]
    class_pd: list[float]
    class_counts: list[int]
    objective: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.boundaries) != len(self.labels) - 1:
            raise ValueError("need K-1 boundaries for K labels")
        if any(b1 <= b0 for b0, b1 in zip(self.boundaries, self.boundaries[1:])):
            raise ValueError("boundaries must be strictly increasing")

    @property
    def k(self) -> int:
        return len(self.labels)

    def assign(self, pds) -> np.ndarray:
        """Class index per PD; class k covers [b_{k-1}, b_k)."""
        return np.searchsorted(np.asarray(self.boundaries), np.asarray(pds, dtype=np.float64), side="right")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RatingScale":
        return cls(list(d["labels"]), [float(b) for b in d["boundaries"]], [float(p) for p in d["class_pd"]],
                   [int(c) for c in d["class_counts"]], float(d.get("objective", 0.0)), dict(d.get("meta", {})))


class BinningObjective:
    """Within-class squared PD dispersion over sorted PDs via prefix sums."""

    def __init__(self, pds, k: int, min_share: float, penalty: float):
        self.p = np.sort(np.asarray(pds, dtype=np.float64))
        self.n = len(self.p)
        self.k = k
        self.min_count = min_share * self.n
        self.penalty = penalty
        self.s1 = np.r_[0.0, np.cumsum(self.p)]
        self.s2 = np.r_[0.0, np.cumsum(self.p ** 2)]

    def cuts(self, boundaries) -> np.ndarray:
        return np.r_[0, np.searchsorted(self.p, boundaries, side="left"), self.n]

    def parts(self, boundaries):
        c = self.cuts(boundaries)
        counts = np.diff(c)
        sums = self.s1[c[1:]] - self.s1[c[:-1]]
        sq = self.s2[c[1:]] - self.s2[c[:-1]]
        with np.errstate(invalid="ignore", divide="ignore"):
            means = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
        sse = np.where(counts > 0, sq - sums * np.nan_to_num(means), 0.0)
        return counts, means, np.maximum(sse, 0.0)

    def violations(self, boundaries) -> int:
        b = np.asarray(boundaries)
        counts, means, _ = self.parts(b)
        v = int(np.sum(np.diff(b) <= 0))
        v += int(np.sum(counts < self.min_count) + np.sum(counts == 0))
        m = means[counts > 0]
        v += int(np.sum(np.diff(m) < 0))
        return v

    def dispersion(self, boundaries) -> float:
        return float(self.parts(boundaries)[2].sum())

    def __call__(self, boundaries) -> float:
        b = np.sort(np.asarray(boundaries, dtype=np.float64))
        return self.dispersion(b) + self.penalty * self.violations(b)


def _sse(obj: BinningObjective, lo, hi):
    cnt = hi - lo
    s = obj.s1[hi] - obj.s1[lo]
    q = obj.s2[hi] - obj.s2[lo]
    return np.maximum(q - s * s / np.maximum(cnt, 1), 0.0)


def _polish(obj: BinningObjective, b: np.ndarray) -> np.ndarray:
    """Coordinate-wise exact search: move one boundary at a time to the best
    data midpoint between its neighbours, until no boundary moves."""
    p = obj.p
    if obj.violations(np.sort(b)):
        return b
    cuts = obj.cuts(np.sort(b))
    # a cut at index c separates p[c-1] < p[c]
    valid = np.r_[False, p[1:] > p[:-1], False]
    need = max(1, math.ceil(obj.min_count - 1e-12))
    best = obj.dispersion(np.sort(b))
    for _sweep in range(100):
        moved = False
        for j in range(1, len(cuts) - 1):
            lo, hi = cuts[j - 1], cuts[j + 1]
            cand = np.arange(lo + need, hi - need + 1)
            cand = cand[valid[cand]]
            if len(cand) == 0:
                continue
            total = _sse(obj, lo, cand) + _sse(obj, cand, hi)
            i = int(np.argmin(total))
            current = float(_sse(obj, lo, cuts[j]) + _sse(obj, cuts[j], hi))
            if total[i] < current - 1e-15 and cand[i] != cuts[j]:
                cuts[j] = cand[i]
                moved = True
        if not moved:
            break
    out = np.array([(p[c - 1] + p[c]) / 2.0 for c in cuts[1:-1]])
    if obj.violations(out) or obj.dispersion(out) > best:
        return np.sort(b)
    return out


def differential_evolution(objective: Callable, dim: int, rng: np.random.Generator, params: DEParams,
                           lower: float = LOWER, upper: float = UPPER):
    """rand/1/bin DE with greedy one-to-one selection; returns (best, best_value, history)."""
    npop = max(5, params.pop_per_dim * dim)
    pop = rng.uniform(lower, upper, size=(npop, dim))
    pop.sort(axis=1)
    energy = np.array([objective(x) for x in pop])
    history = [float(energy.min())]
    stale = 0
    for _gen in range(params.max_generations):
        # one generator draw per generation keeps the stream independent of evaluation order
        r = rng.random((npop, 3))
        jrand = rng.integers(dim, size=npop)
        cross = rng.random((npop, dim)) < params.CR
        prev_best = energy.min()
        for i in range(npop):
            others = np.delete(np.arange(npop), i)
            picks = others[np.floor(r[i] * (npop - 1)).astype(int)]
            a, b, c = pop[picks[0]], pop[picks[1]], pop[picks[2]]
            mutant = a + params.F * (b - c)
            mask = cross[i].copy()
            mask[jrand[i]] = True
            trial = np.where(mask, mutant, pop[i])
            # reflect out-of-range coordinates back into the box
            trial = np.where(trial < lower, lower + (lower - trial) % (upper - lower), trial)
            trial = np.where(trial > upper, upper - (trial - upper) % (upper - lower), trial)
            trial.sort()
            e = objective(trial)
            if e <= energy[i]:
                pop[i], energy[i] = trial, e
        best = energy.min()
        history.append(float(best))
        stale = stale + 1 if best >= prev_best else 0
        if stale >= params.stagnation:
            break
    i = int(np.argmin(energy))
    return pop[i].copy(), float(energy[i]), history


def de_bin(pds, targets=None, k: int = 9, min_share: float = 0.005, de_params: DEParams | None = None,
           seed: int = 0, labels=None, objective_factory=BinningObjective) -> RatingScale:
    """Cluster calibrated PDs into ``k`` ordered classes."""
    if k < 2:
        raise ValueError("k must be >= 2")
    params = de_params or DEParams()
    pds = np.asarray(pds, dtype=np.float64)
    if len(pds) * min_share * k > len(pds) or len(pds) < k:
        raise InfeasibleScaleError("not enough samples for the minimum class share")
    if labels is None:
        labels = list(DEFAULT_LABELS) if k == len(DEFAULT_LABELS) else [f"R{i + 1}" for i in range(k)]
    obj = objective_factory(pds, k, min_share, params.penalty)
    rng = np.random.default_rng(seed)
    best, value, history = differential_evolution(obj, k - 1, rng, params)
    if params.polish:
        best = _polish(obj, best)
        value = obj(best)
    best = np.sort(best)
    if obj.violations(best):
        raise InfeasibleScaleError(
            f"no feasible scale found: best objective {value:.6g} with {obj.violations(best)} violations")
    counts, means, _ = obj.parts(best)
    class_counts = [int(c) for c in counts]
    observed = None
    if targets is not None:
        t = np.asarray(targets, dtype=np.float64)
        idx = np.searchsorted(best, pds, side="right")
        observed = [float(t[idx == j].mean()) if np.any(idx == j) else None for j in range(k)]
    meta = {"seed": int(seed), "generations": len(history) - 1, "history_tail": history[-5:],
            "min_share": min_share, "n": int(len(pds)), "fit_default_rate": observed}
    return RatingScale(list(labels), [float(b) for b in best], [float(m) for m in means], class_counts,
                       float(obj.dispersion(best)), meta)


def binomial_test(defaults: int, n: int, pd: float, alpha: float = 0.05) -> tuple[float, bool]:
    """One-sided P(X >= defaults), X ~ Binomial(n, pd), summed in log space."""
    if not 0 < pd < 1:
        raise ValueError("pd must lie in (0, 1)")
    if not 0 <= defaults <= n:
        raise ValueError("need 0 <= defaults <= n")
    if defaults == 0:
        return 1.0, True
    ks = np.arange(defaults, n + 1)
    logpmf = (gammaln(n + 1) - gammaln(ks + 1) - gammaln(n - ks + 1)
              + ks * math.log(pd) + (n - ks) * math.log1p(-pd))
    p = float(min(1.0, math.exp(logsumexp(logpmf))))
    return p, p >= alpha


def traffic_light(p_k: float, pd_k: float, n_k: int, k_y: float = K_YELLOW, k_0: float = K_ORANGE) -> str:
    sigma = math.sqrt(pd_k * (1 - pd_k) / n_k)
    if p_k < pd_k:
        return "Green"
    if p_k < pd_k + k_y * sigma:
        return "Yellow"
    if p_k < pd_k + k_0 * sigma:
        return "Orange"
    return "Red"


@dataclass
class ClassValidation:
    label: str
    lower: float
    upper: float
    observed_rate: float | None
    class_pd: float
    count: int
    defaults: int
    binomial_p: float | None
    binomial_pass: bool | None
    traffic_light: str | None


def validate_scale(scale: RatingScale, pds, targets, alpha: float = 0.05, min_count: int = 50,
                   k_y: float = K_YELLOW, k_0: float = K_ORANGE) -> list[ClassValidation]:
    """Per-class out-of-time checks; classes under ``min_count`` skip the binomial test."""
    pds = np.asarray(pds, dtype=np.float64)
    y = np.asarray(targets)
    if len(pds) == 0:
        raise ValueError("out-of-time sample is empty")
    idx = scale.assign(pds)
    edges = [0.0] + list(scale.boundaries) + [1.0]
    out = []
    for j, label in enumerate(scale.labels):
        mask = idx == j
        n = int(mask.sum())
        d = int(y[mask].sum())
        pd_k = scale.class_pd[j]
        rate = d / n if n else None
        p_val = passed = light = None
        if n:
            light = traffic_light(rate, pd_k, n, k_y, k_0)
            if n >= min_count:
                p_val, passed = binomial_test(d, n, pd_k, alpha)
        out.append(ClassValidation(label, edges[j], edges[j + 1], rate, pd_k, n, d, p_val, passed, light))
    return out


def validation_frame(rows: list[ClassValidation]) -> pd.DataFrame:
    """Table layout: class, PD bin, class PD, out-of-time rate, binomial result, light."""
    return pd.DataFrame({
        "rating_class": [r.label for r in rows],
        "pd_bin_lower": [r.lower for r in rows],
        "pd_bin_upper": [r.upper for r in rows],
        "class_pd": [r.class_pd for r in rows],
        "oot_default_rate": [r.observed_rate for r in rows],
        "count": [r.count for r in rows],
        "defaults": [r.defaults for r in rows],
        "binomial_p": [r.binomial_p for r in rows],
        "binomial_test": ["-" if r.binomial_pass is None else ("Passed" if r.binomial_pass else "Failed") for r in rows],
        "traffic_light": [r.traffic_light or "-" for r in rows],
    })


def scale_failures(rows: list[ClassValidation], max_flagged: int = 1) -> list[str]:
    """Classes that are Red and fail the binomial test; the scale fails when
    more than ``max_flagged`` of them occur."""
    flagged = [r.label for r in rows if r.traffic_light == "Red" and r.binomial_pass is False]
    return flagged if len(flagged) > max_flagged else []
