#!/usr/bin/env python3
"""Run the whole CLI chain on freshly generated synthetic data.

    python3 scripts/run_pipeline.py --out runs/demo --companies 180000 --seed 7

Stages: synth, ingest, features, train, calibrate, score, bins,
validate-scale, explain, map-cr, validate-mapping, backtest. Prints a JSON
summary with per-stage timings and the headline metrics.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from ratemill import boster
from ratemill.cli import run

import pandas as pd


def pipeline(out: Path, companies: int, seed: int, tune_budget: int = 0, n_cr: int = 2000,
             stages_only: bool = False) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    data, work = out / "data", out / "work"
    cfg = {"n_companies": companies, "n_cr_companies": n_cr, "theoretical_auc": 0.90}
    (out / "synth.json").write_text(json.dumps(cfg))
    (out / "train.json").write_text(json.dumps({"tune_budget": tune_budget,
                                                "params": {"n_rounds": 200, "learning_rate": 0.05,
                                                           "num_leaves": 15, "min_child_weight": 5.0}}))
    s = ["--seed", str(seed)]
    steps = [
        ("synth", ["synth", "--config", out / "synth.json", "--out", data]),
        ("ingest", ["ingest", "--input", data / "snapshots.csv", "--statuses", data / "statuses.csv",
                    "--prior", data / "prior.csv", "--out", work]),
        ("features", ["features", "--train", work / "train.csv", "--out", work]),
        ("train", ["train", "--features", work / "features.json", "--train", work / "fit.csv",
                   "--config", out / "train.json", "--out", work / "model.json"]),
        ("calibrate", ["calibrate", "--model", work / "model.json", "--calib", work / "calib.csv",
                       "--out", work / "model.json"]),
        ("score_calib", ["score", "--model", work / "model.json", "--input", work / "calib.csv",
                         "--out", work / "scores_calib.csv"]),
        ("score_oos", ["score", "--model", work / "model.json", "--input", work / "test_oos.csv",
                       "--out", work / "scores_oos.csv"]),
        ("score_oot", ["score", "--model", work / "model.json", "--input", work / "test_oot.csv",
                       "--out", work / "scores_oot.csv"]),
        ("bins", ["bins", "--scores", work / "scores_calib.csv", "--out", work / "scale.json"]),
        ("validate_scale", ["validate-scale", "--scale", work / "scale.json", "--scores", work / "scores_oot.csv",
                            "--out", work / "scale_validation.csv"]),
        ("explain", ["explain", "--model", work / "model.json", "--input", work / "test_oos.csv",
                     "--out", work / "explain"]),
        ("map_cr", ["map-cr", "--lines", data / "cr_lines.csv", "--phenomena", data / "cr_phenomena.csv",
                    "--lookups", data / "lookups", "--out", work / "cr_snapshots.csv"]),
        ("validate_mapping", ["validate-mapping", "--bureau", data / "snapshots.csv",
                              "--cr", work / "cr_snapshots.csv", "--n", "180", "--out", work / "mapping_tests.csv"]),
        ("backtest", ["backtest", "--model", work / "model.json", "--snapshots", work / "cr_snapshots.csv",
                      "--statuses", data / "cr_statuses.csv", "--native", data / "snapshots.csv",
                      "--out", work / "backtest.json"]),
    ]
    timings, codes = {}, {}
    for name, argv in steps:
        t = time.time()
        codes[name] = run([str(a) for a in argv] + s)
        timings[name] = round(time.time() - t, 2)
        if codes[name] == 2:
            raise RuntimeError(f"stage {name} failed with an input error")
    summary = {"exit_codes": codes, "timings": timings, "total_seconds": round(sum(timings.values()), 2)}
    if stages_only:
        return summary
    oos = pd.read_csv(work / "scores_oos.csv")
    split = json.loads((work / "split_manifest.json").read_text())
    back = json.loads((work / "backtest.json").read_text())
    summary.update({
        "split": split,
        "oos_auc": boster.auc(oos["pd"], oos["target"]),
        "backtest_auc_mapped": back["mapped"]["auc"],
        "backtest_auc_native": back["native"]["auc"],
        "backtest_auc_gap": back["auc_gap"],
    })
    return summary


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--companies", type=int, default=180000)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--tune-budget", type=int, default=0)
    args = ap.parse_args(argv)
    summary = pipeline(args.out, args.companies, args.seed, args.tune_budget)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
