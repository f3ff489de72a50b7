"""Beta calibration of classifier scores plus Brier-based diagnostics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

CLIP = 1e-6


class CalibrationError(RuntimeError):
    pass


@dataclass
class CalibrationMap:
    """mu(p) = 1 / (1 + 1 / (exp(c) * p**a / (1 - p)**b))."""

    a: float = 1.0
    b: float = 1.0
    c: float = 0.0
    fit_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.a < 0 or self.b < 0:
            raise ValueError("a and b must be non-negative")

    def logit(self, scores) -> np.ndarray:
        p = np.clip(np.asarray(scores, dtype=np.float64), CLIP, 1 - CLIP)
        return self.c + self.a * np.log(p) - self.b * np.log1p(-p)

    def __call__(self, scores) -> np.ndarray:
        z = self.logit(scores)
        return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))

    def to_dict(self) -> dict:
        return {"a": self.a, "b": self.b, "c": self.c, "fit_meta": self.fit_meta}

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationMap":
        return cls(float(d["a"]), float(d["b"]), float(d["c"]), dict(d.get("fit_meta", {})))


def _log_loss(Z, y, w):
    z = Z @ w
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


def _newton(Z, y, tol=1e-10, max_iter=100):
    """Damped Newton for logistic regression without penalty."""
    w = np.zeros(Z.shape[1])
    loss = _log_loss(Z, y, w)
    n = len(y)
    for it in range(1, max_iter + 1):
        z = Z @ w
        p = 1.0 / (1.0 + np.exp(-z))
        grad = Z.T @ (p - y) / n
        gnorm = float(np.linalg.norm(grad))
        if gnorm < tol:
            return w, loss, it - 1, gnorm
        H = (Z * (p * (1 - p))[:, None]).T @ Z / n
        step = np.linalg.lstsq(H, grad, rcond=None)[0]
        t = 1.0
        while t > 1e-10:
            cand = w - t * step
            cand_loss = _log_loss(Z, y, cand)
            if cand_loss <= loss + 1e-4 * t * float(grad @ -step):
                break
            t *= 0.5
        w, loss = cand, cand_loss
    z = Z @ w
    p = 1.0 / (1.0 + np.exp(-z))
    gnorm = float(np.linalg.norm(Z.T @ (p - y) / n))
    if gnorm < tol * 1e3:
        return w, loss, max_iter, gnorm
    raise CalibrationError(f"beta calibration did not converge: gradient norm {gnorm:.3e} after {max_iter} iterations")


def fit_beta(scores, targets, tol: float = 1e-10, max_iter: int = 100) -> CalibrationMap:
    """Maximum-likelihood beta calibration with non-negative shape parameters."""
    p = np.clip(np.asarray(scores, dtype=np.float64), CLIP, 1 - CLIP)
    y = np.asarray(targets, dtype=np.float64)
    if len(p) != len(y) or len(y) == 0:
        raise ValueError("scores and targets must be non-empty and of equal length")
    if y.min() == y.max():
        raise ValueError("both classes must be present")
    x1 = np.log(p)
    x2 = -np.log1p(-p)
    ones = np.ones_like(p)
    Z = np.column_stack([x1, x2, ones])
    w, loss, iters, gnorm = _newton(Z, y, tol, max_iter)
    a, b, c = w
    dropped = None
    if a < 0 or b < 0:
        # pin the offending shape coefficient to zero and refit the rest
        dropped = "a" if a < b else "b"
        cols = [1, 2] if dropped == "a" else [0, 2]
        w2, loss, iters, gnorm = _newton(Z[:, cols], y, tol, max_iter)
        if dropped == "a":
            a, b, c = 0.0, w2[0], w2[1]
        else:
            a, b, c = w2[0], 0.0, w2[1]
        if a < 0 or b < 0:
            w3, loss, iters, gnorm = _newton(Z[:, [2]], y, tol, max_iter)
            a, b, c = 0.0, 0.0, w3[0]
            dropped = "ab"
    meta = {"n": int(len(y)), "log_loss": float(loss), "iterations": int(iters),
            "gradient_norm": float(gnorm), "dropped": dropped}
    return CalibrationMap(float(max(a, 0.0)), float(max(b, 0.0)), float(c), meta)


def brier(forecasts, outcomes) -> float:
    f = np.asarray(forecasts, dtype=np.float64)
    o = np.asarray(outcomes, dtype=np.float64)
    if f.size == 0 or f.shape != o.shape:
        raise ValueError("forecasts and outcomes must be non-empty and of equal length")
    return float(np.mean((f - o) ** 2))


def brier_skill(forecasts, outcomes) -> float:
    """1 - BS / BS of the constant base-rate forecast."""
    o = np.asarray(outcomes, dtype=np.float64)
    if o.size == 0 or o.min() == o.max():
        raise ValueError("outcomes must contain both classes")
    ref = brier(np.full_like(o, o.mean()), o)
    return 1.0 - brier(forecasts, o) / ref


@dataclass
class ReliabilityTable:
    bins: pd.DataFrame  # lower, upper, mean_forecast, observed_rate, count

    @property
    def total(self) -> int:
        return int(self.bins["count"].sum())


def reliability(forecasts, outcomes, n_bins: int = 10) -> ReliabilityTable:
    """Equal-width bins on [0, 1]; the last bin is closed on the right."""
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    f = np.asarray(forecasts, dtype=np.float64)
    o = np.asarray(outcomes, dtype=np.float64)
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    idx = np.clip(np.searchsorted(edges, f, side="right") - 1, 0, n_bins - 1)
    count = np.bincount(idx, minlength=n_bins)
    sf = np.bincount(idx, weights=f, minlength=n_bins)
    so = np.bincount(idx, weights=o, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_f = np.where(count > 0, sf / np.maximum(count, 1), math.nan)
        rate = np.where(count > 0, so / np.maximum(count, 1), math.nan)
    table = pd.DataFrame({"lower": edges[:-1], "upper": edges[1:], "mean_forecast": mean_f,
                          "observed_rate": rate, "count": count})
    return ReliabilityTable(table)
