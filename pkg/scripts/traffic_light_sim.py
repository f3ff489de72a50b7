#!/usr/bin/env python3
"""Simulate traffic-light colour frequencies for correctly calibrated classes.

    python3 scripts/traffic_light_sim.py --trials 20000 --n 1000
"""
from __future__ import annotations

import argparse
import json
import sys
from collections import Counter

import numpy as np

from ratemill.ratingscale import traffic_light


def simulate(trials: int, n: int, pd_lo: float, pd_hi: float, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    pd_k = rng.uniform(pd_lo, pd_hi, trials)
    p_k = rng.binomial(n, pd_k) / n
    counts = Counter(traffic_light(p, q, n) for p, q in zip(p_k, pd_k))
    return {c: counts[c] / trials for c in ("Green", "Yellow", "Orange", "Red")}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trials", type=int, default=20000)
    ap.add_argument("--n", type=int, default=1000)
    ap.add_argument("--pd-range", type=float, nargs=2, default=(0.02, 0.2))
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args(argv)
    print(json.dumps(simulate(args.trials, args.n, *args.pd_range, args.seed), indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
