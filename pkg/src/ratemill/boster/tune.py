"""Randomised hyperparameter search under expanding-window time-series CV."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, replace

import numpy as np

from ..matrix import FeatureMatrix
from .metrics import DEFAULT_BETA, report
from .trees import BoostParams, fit, predict_proba

log = logging.getLogger(__name__)

RANGES = {
    "learning_rate": (0.01, 0.3),
    "num_leaves": (7, 127),
    "min_child_weight": (1.0, 100.0),
    "reg_lambda": (0.1, 10.0),
}


def sample_params(rng: np.random.Generator, prevalence: float, base: BoostParams) -> BoostParams:
    lo, hi = RANGES["learning_rate"]
    lr = math.exp(rng.uniform(math.log(lo), math.log(hi)))
    leaves = int(rng.integers(RANGES["num_leaves"][0], RANGES["num_leaves"][1] + 1))
    lo, hi = RANGES["min_child_weight"]
    mcw = math.exp(rng.uniform(math.log(lo), math.log(hi)))
    lam = float(rng.uniform(*RANGES["reg_lambda"]))
    weight = 1.0 if rng.integers(2) == 0 else (1.0 - prevalence) / prevalence
    return replace(base, learning_rate=lr, num_leaves=leaves, min_child_weight=mcw,
                   reg_lambda=lam, class_weight=float(weight))


def expanding_folds(vintages: np.ndarray):
    """(train_rows, valid_rows) pairs: train on years <= y, validate on the next year."""
    years = np.unique(vintages)
    if len(years) < 2:
        raise ValueError("time-series CV needs at least 2 vintages")
    folds = []
    for i in range(len(years) - 1):
        tr = np.flatnonzero(vintages <= years[i])
        va = np.flatnonzero(vintages == years[i + 1])
        folds.append((tr, va))
    return folds


def cv_score(train: FeatureMatrix, vintages, params: BoostParams, seed: int, beta: float = DEFAULT_BETA) -> float:
    """Mean F-beta at threshold 0.5 over the expanding folds; nan if every fold is degenerate."""
    scores = []
    for tr, va in expanding_folds(np.asarray(vintages)):
        yt, yv = train.target[tr], train.target[va]
        if yt.min() == yt.max() or yv.min() == yv.max():
            continue
        model = fit(train.take(tr), params, seed)
        scores.append(report(predict_proba(model, train.take(va)), yv, 0.5, beta).f_beta)
    return float(np.mean(scores)) if scores else float("nan")


def tune(train: FeatureMatrix, vintages, budget: int, seed: int, beta: float = DEFAULT_BETA,
         base: BoostParams | None = None, n_jobs: int = 1) -> tuple[BoostParams, list[dict]]:
    """Sample ``budget`` configurations and return the best one with the trial log."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    base = base or BoostParams()
    prevalence = float(np.mean(train.target))
    rng = np.random.default_rng(seed)
    candidates = [sample_params(rng, prevalence, base) for _ in range(budget)]

    def run(params):
        return cv_score(train, vintages, params, seed, beta)

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            scores = list(pool.map(run, candidates))
    else:
        scores = [run(p) for p in candidates]
    trials = [{"params": asdict(p), "cv_f_beta": s} for p, s in zip(candidates, scores)]
    valid = [i for i, s in enumerate(scores) if not math.isnan(s)]
    if not valid:
        raise ValueError("all sampled configurations produced degenerate fits")
    best = max(valid, key=lambda i: (scores[i], -i))
    log.info("best cv F-beta %.4f from trial %d of %d", scores[best], best, budget)
    return candidates[best], trials
