"""``ratemill`` command line: one subcommand per pipeline stage.

Exit codes: 0 success, 1 validation failure, 2 input or configuration error.
Data goes to files; logs go to standard error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__, boster, calibrator, crbridge, datamodel, explainer, featurekit, ratingscale, statlab, synthgen
from .pipeline import ScoringPipeline, dumps

log = logging.getLogger("ratemill")

EXIT_OK, EXIT_FAILED, EXIT_INPUT = 0, 1, 2


class ValidationFailure(Exception):
    """Raised when a check ran correctly but the artifact did not pass."""


# ---------------------------------------------------------------- manifests

def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions() -> dict:
    import numba
    import scipy

    return {"ratemill": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "pandas": pd.__version__, "scipy": scipy.__version__, "numba": numba.__version__}


@dataclass
class RunManifest:
    command: str
    config_hash: str
    input_digests: dict
    seed: int
    versions: dict
    wall_clock_seconds: float
    outputs: dict = field(default_factory=dict)

    def comparable(self) -> dict:
        """Everything except timing, for reproducibility checks."""
        d = asdict(self)
        d.pop("wall_clock_seconds")
        return d


def _manifest_path(out: Path, command: str) -> Path:
    if out.suffix:
        return out.with_name(out.name + ".manifest.json")
    return out / f"manifest_{command}.json"


def write_manifest(command: str, args: argparse.Namespace, config: dict, inputs: dict, outputs: list,
                   out: Path, started: float) -> Path:
    config_blob = json.dumps({"args": _arg_dict(args), "config": config}, sort_keys=True, default=str)
    manifest = RunManifest(
        command=command,
        config_hash=hashlib.sha256(config_blob.encode()).hexdigest(),
        input_digests={k: file_digest(v) for k, v in inputs.items() if v and Path(v).is_file()},
        seed=int(args.seed or 0),
        versions=_versions(),
        wall_clock_seconds=round(time.time() - started, 3),
        outputs={Path(p).name: file_digest(p) for p in outputs if Path(p).is_file()},
    )
    path = _manifest_path(out, command)
    path.write_text(dumps(asdict(manifest)))
    return path


def _arg_dict(args) -> dict:
    skip = {"func", "log_level", "threads"}
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in skip:
            continue
        # paths are recorded by digest, not by location
        out[k] = None if (isinstance(v, str) and k in {"out", "input", "prior", "statuses", "train", "features",
                                                        "model", "calib", "scores", "scale", "lines", "phenomena",
                                                        "lookups", "pairs", "bureau", "cr", "snapshots", "native",
                                                        "config", "battery", "report"}) else v
    return out


def _load_config(path) -> dict:
    if not path:
        return {}
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise ValueError("config must be a JSON object")
    return data


def _read_csv(path) -> pd.DataFrame:
    if not Path(path).is_file():
        raise FileNotFoundError(f"input not found: {path}")
    return pd.read_csv(path, dtype={"company_id": str, "reference_date": str}, keep_default_na=False,
                       na_values=[""])


def _seed(args, config: dict) -> int:
    if args.seed is not None:
        return int(args.seed)
    return int(config.get("seed", 0))


def _require(*paths):
    for p in paths:
        if p and not Path(p).exists():
            raise FileNotFoundError(f"input not found: {p}")


def _stratified_holdout(target: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    mask = np.zeros(len(target), dtype=bool)
    for value in (0, 1):
        idx = np.flatnonzero(target == value)
        mask[rng.permutation(idx)[: int(math.floor(fraction * len(idx) + 0.5))]] = True
    return mask


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> tuple:
    config = _load_config(args.config)
    if args.seed is not None:
        config["seed"] = args.seed
    cfg = synthgen.GeneratorConfig.from_dict(config)
    args.seed = cfg.seed
    data = synthgen.generate(cfg)
    paths = synthgen.write(data, args.out)
    log.info("wrote %d bureau snapshots and %d CR line rows to %s", len(data.snapshots), len(data.cr_lines), args.out)
    return list(paths.values()), asdict(cfg), {}


def cmd_ingest(args) -> tuple:
    _require(args.input, args.prior, args.statuses)
    seed = _seed(args, {})
    args.seed = seed
    report = datamodel.IngestReport()
    snaps = datamodel.normalize_snapshots(_read_csv(args.input), report)
    statuses = None
    if args.statuses:
        statuses = _read_csv(args.statuses)
        statuses["special_status"] = statuses["special_status"].fillna("none")
    prior = datamodel.read_prior(args.prior)
    split = datamodel.ingest(snaps, prior, seed, args.reference_month, report, statuses)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for name in ("train", "test_oos", "test_oot"):
        path = out / f"{name}.csv"
        getattr(split, name).to_csv(path, index=False)
        files.append(path)
    (out / "split_manifest.json").write_text(dumps(split.manifest()))
    (out / "ingest_report.json").write_text(dumps(asdict(report)))
    files += [out / "split_manifest.json", out / "ingest_report.json"]
    return files, {}, {"input": args.input, "prior": args.prior, "statuses": args.statuses}


def cmd_features(args) -> tuple:
    if not args.train:
        if not args.input:
            raise ValueError("give --train <csv> or --input <ingest dir>")
        args.train = str(Path(args.input) / "train.csv")
    _require(args.train)
    config = _load_config(args.config)
    seed = _seed(args, config)
    args.seed = seed
    config["seed"] = seed
    cfg = featurekit.FeatureConfig.from_dict(config)
    train = datamodel.normalize_snapshots(_read_csv(args.train))
    if "target" not in train:
        raise ValueError("training data needs a target column")
    calib_mask = _stratified_holdout(train["target"].to_numpy(), args.calib_fraction, seed)
    fit_part = train[~calib_mask].reset_index(drop=True)
    calib_part = train[calib_mask].reset_index(drop=True)
    pipe = featurekit.FeaturePipeline(cfg).fit(fit_part, select=not args.no_selection)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "features.json").write_text(dumps(pipe.to_dict()))
    fit_part.to_csv(out / "fit.csv", index=False)
    calib_part.to_csv(out / "calib.csv", index=False)
    log.info("selected %d features: %s", len(pipe.selected), ", ".join(pipe.selected))
    return [out / "features.json", out / "fit.csv", out / "calib.csv"], config, {"train": args.train}


def cmd_train(args) -> tuple:
    _require(args.features, args.train)
    config = _load_config(args.config)
    seed = _seed(args, config)
    args.seed = seed
    features = featurekit.FeaturePipeline.from_dict(json.loads(Path(args.features).read_text()))
    frame = datamodel.normalize_snapshots(_read_csv(args.train))
    X = features.transform(frame)
    if X.target is None:
        raise ValueError("training data needs a target column")
    X.target = X.target.astype(int)
    beta = float(config.get("beta", boster.DEFAULT_BETA))
    base = boster.BoostParams.from_dict(config.get("params", {}))
    budget = int(config.get("tune_budget", 0))
    training = {"seed": seed, "n_train": len(X), "positives": int(X.target.sum())}
    params = base
    if budget > 0:
        vintages = frame["reference_date"].map(lambda m: datamodel.month_index(m) // 12).to_numpy()
        params, trials = boster.tune(X, vintages, budget, seed, beta, base, n_jobs=args.threads)
        training["trials"] = trials
    model = boster.fit(X, params, seed)
    training["params"] = asdict(params)
    training["train_metrics"] = boster.report(boster.predict_proba(model, X), X.target, 0.5, beta).to_dict()
    pipe = ScoringPipeline(features, model, None, float(config.get("threshold", 0.5)), beta, training)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    pipe.save(out)
    return [out], config, {"features": args.features, "train": args.train}


def cmd_calibrate(args) -> tuple:
    _require(args.model, args.calib)
    pipe = ScoringPipeline.load(args.model)
    frame = _read_csv(args.calib)
    X = pipe.matrix(frame)
    y = frame["target"].to_numpy().astype(int)
    raw = pipe.raw_scores(X)
    cmap = calibrator.fit_beta(raw, y)
    pipe.calibration = cmap
    post = cmap(raw)
    report = {
        "a": cmap.a, "b": cmap.b, "c": cmap.c,
        "brier_raw": calibrator.brier(raw, y),
        "brier_calibrated": calibrator.brier(post, y),
        "brier_skill_raw": calibrator.brier_skill(raw, y),
        "brier_skill_calibrated": calibrator.brier_skill(post, y),
        "auc_raw": boster.auc(raw, y),
        "auc_calibrated": boster.auc(post, y),
        "reliability": calibrator.reliability(post, y).bins.to_dict(orient="list"),
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    pipe.save(out)
    report_path = Path(args.report) if args.report else out.with_name("calibration_report.json")
    report_path.write_text(dumps(report))
    log.info("brier %.5f -> %.5f", report["brier_raw"], report["brier_calibrated"])
    return [out, report_path], {}, {"model": args.model, "calib": args.calib}


def cmd_score(args) -> tuple:
    _require(args.model, args.input)
    pipe = ScoringPipeline.load(args.model)
    frame = _read_csv(args.input)
    X = pipe.matrix(frame)
    raw = pipe.raw_scores(X)
    out_frame = pd.DataFrame({
        "company_id": frame["company_id"].astype(str) if "company_id" in frame else np.arange(len(frame)),
        "reference_date": frame["reference_date"] if "reference_date" in frame else "",
        "score": raw,
        "pd": pipe.pds(raw),
    })
    if "target" in frame:
        out_frame["target"] = frame["target"].to_numpy().astype(int)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out_frame.to_csv(out, index=False)
    return [out], {}, {"model": args.model, "input": args.input}


def cmd_bins(args) -> tuple:
    _require(args.scores)
    config = _load_config(args.config)
    seed = _seed(args, config)
    args.seed = seed
    scores = _read_csv(args.scores)
    de = ratingscale.DEParams(**config.get("de", {}))
    k = int(config.get("k", args.k))
    min_share = float(config.get("min_share", args.min_share))
    labels = config.get("labels")
    targets = scores["target"].to_numpy() if "target" in scores else None
    scale = ratingscale.de_bin(scores["pd"].to_numpy(), targets, k, min_share, de, seed, labels)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(dumps(scale.to_dict()))
    return [out], config, {"scores": args.scores}


def cmd_validate_scale(args) -> tuple:
    _require(args.scale, args.scores)
    scale = ratingscale.RatingScale.from_dict(json.loads(Path(args.scale).read_text()))
    scores = _read_csv(args.scores)
    rows = ratingscale.validate_scale(scale, scores["pd"].to_numpy(), scores["target"].to_numpy().astype(int),
                                      args.alpha, args.min_count)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ratingscale.validation_frame(rows).to_csv(out, index=False)
    failed = ratingscale.scale_failures(rows, args.max_flagged)
    files = [out]
    if failed:
        raise ValidationFailure(f"rating classes Red and failing the binomial test: {', '.join(failed)}",
                                files, {"scale": args.scale, "scores": args.scores})
    return files, {}, {"scale": args.scale, "scores": args.scores}


def cmd_explain(args) -> tuple:
    _require(args.model, args.input)
    pipe = ScoringPipeline.load(args.model)
    frame = _read_csv(args.input)
    X = pipe.matrix(frame)
    seed = _seed(args, {})
    args.seed = seed
    rows = np.arange(len(X))
    if len(rows) > args.max_rows:
        rows = np.sort(np.random.default_rng(seed).choice(len(rows), args.max_rows, replace=False))
    sub = X.take(rows)
    phi, ranking = explainer.summary_stats(pipe.model, sub)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ranking.to_csv(out / "shap_summary.csv", index=False)
    pd.DataFrame(phi, columns=pipe.model.feature_names).to_csv(out / "shap_values.csv", index=False)
    feature = args.feature or ranking["feature"].iloc[0]
    interaction = args.interaction or ranking["feature"].iloc[1 if len(ranking) > 1 else 0]
    explainer.dependence_data(pipe.model, sub, feature, interaction).to_csv(out / "dependence.csv", index=False)
    if not 0 <= args.row < len(X):
        raise ValueError(f"row {args.row} out of range")
    wf = explainer.waterfall_data(pipe.model, X.values[args.row], args.top_n, pipe.features.groups)
    (out / "waterfall.json").write_text(dumps(wf))
    files = [out / "shap_summary.csv", out / "shap_values.csv", out / "dependence.csv", out / "waterfall.json"]
    return files, {}, {"model": args.model, "input": args.input}


def cmd_map_cr(args) -> tuple:
    _require(args.lines, args.phenomena, args.lookups)
    lines = crbridge.read_lines(args.lines)
    phenomena = crbridge.read_phenomena(args.phenomena) if args.phenomena else None
    lookups = crbridge.Lookups.from_dir(args.lookups) if args.lookups else crbridge.Lookups()
    frame, report = crbridge.map_frame(lines, phenomena, lookups, args.reference_month,
                                       strict=not args.allow_short_history)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out, index=False)
    report_path = out.with_name(out.stem + "_mapping_report.json")
    report_path.write_text(dumps(report))
    return [out, report_path], {}, {"lines": args.lines, "phenomena": args.phenomena}


def cmd_validate_mapping(args) -> tuple:
    battery = _load_config(args.battery).get("tests") if args.battery else None
    battery = battery or statlab.DEFAULT_BATTERY
    if args.pairs:
        _require(args.pairs)
        pairs = _read_csv(args.pairs)
    else:
        if not (args.bureau and args.cr):
            raise ValueError("give --pairs or both --bureau and --cr")
        _require(args.bureau, args.cr)
        bureau = datamodel.normalize_snapshots(_read_csv(args.bureau))
        cr = datamodel.normalize_snapshots(_read_csv(args.cr))
        pairs = crbridge.build_pairs(cr, bureau, [b["feature"] for b in battery])
    if args.n:
        pairs = pairs.iloc[: args.n]
    reports = statlab.run_battery(pairs, battery, args.alpha)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    statlab.battery_frame(reports).to_csv(out, index=False)
    inputs = {"pairs": args.pairs, "bureau": args.bureau, "cr": args.cr, "battery": args.battery}
    kept = [r.name for r in reports if r.decision != "reject_null"]
    if kept:
        raise ValidationFailure(f"nulls not rejected for: {', '.join(kept)}", [out], inputs)
    return [out], {"battery": battery}, inputs


def cmd_backtest(args) -> tuple:
    _require(args.model, args.snapshots, args.statuses, args.native)
    pipe = ScoringPipeline.load(args.model)
    snaps = datamodel.normalize_snapshots(_read_csv(args.snapshots))
    statuses = _read_csv(args.statuses)
    statuses["special_status"] = statuses["special_status"].fillna("none")
    result = statlab.backtest(pipe, snaps, statuses, args.threshold, allow_gaps=args.allow_gaps)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report = {"mapped": result.to_dict()}
    if args.native:
        native = datamodel.normalize_snapshots(_read_csv(args.native))
        native = native[native["company_id"].isin(set(result.scores["company_id"]))]
        nres = statlab.backtest(pipe, native, statuses, args.threshold, allow_gaps=True)
        report["native"] = nres.to_dict()
        joined = result.scores.merge(nres.scores, on="company_id", suffixes=("_mapped", "_native"))
        if len(joined) >= 2:
            tau = statlab.kendall_tau(joined["score_mapped"], joined["score_native"], "kendall_mapped_native")
            report["kendall_mapped_vs_native"] = tau.to_dict()
        report["auc_gap"] = abs(result.report.auc - nres.report.auc)
    out.write_text(dumps(report))
    scores_path = out.with_name(out.stem + "_scores.csv")
    result.scores.to_csv(scores_path, index=False)
    return [out, scores_path], {}, {"model": args.model, "snapshots": args.snapshots, "statuses": args.statuses,
                                    "native": args.native}


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    def globals_parser(top: bool) -> argparse.ArgumentParser:
        # options may appear before or after the subcommand; only the top level sets defaults
        g = argparse.ArgumentParser(add_help=False)
        kw = {} if top else {"default": argparse.SUPPRESS}
        g.add_argument("--seed", type=int, help="single source of randomness (default: config or 0)",
                       **({"default": None} if top else kw))
        g.add_argument("--threads", type=int, help="worker threads",
                       **({"default": os.cpu_count() or 1} if top else kw))
        g.add_argument("--log-level", **({"default": "INFO"} if top else kw))
        return g

    common = globals_parser(False)
    parser = argparse.ArgumentParser(prog="ratemill", description=__doc__.splitlines()[0],
                                     parents=[globals_parser(True)])
    parser.add_argument("--version", action="version", version=f"ratemill {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, parents=[common])
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "generate a synthetic bureau + CR dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)

    p = add("ingest", cmd_ingest, "label, filter and split snapshot records")
    p.add_argument("--input", required=True)
    p.add_argument("--prior", required=True)
    p.add_argument("--statuses", help="horizon status rows (defaults to --input)")
    p.add_argument("--reference-month", type=int, default=3)
    p.add_argument("--out", required=True)

    p = add("features", cmd_features, "fit the feature pipeline on training records")
    p.add_argument("--train")
    p.add_argument("--input", help="ingest output directory holding train.csv")
    p.add_argument("--config")
    p.add_argument("--calib-fraction", type=float, default=0.25)
    p.add_argument("--no-selection", action="store_true")
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "fit the boosted-tree classifier")
    p.add_argument("--features", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)

    p = add("calibrate", cmd_calibrate, "fit beta calibration on a held-out fold")
    p.add_argument("--model", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--report")
    p.add_argument("--out", required=True)

    p = add("score", cmd_score, "score snapshot or feature rows")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)

    p = add("bins", cmd_bins, "build the rating master scale")
    p.add_argument("--scores", required=True)
    p.add_argument("--config")
    p.add_argument("--k", type=int, default=9)
    p.add_argument("--min-share", type=float, default=0.005)
    p.add_argument("--out", required=True)

    p = add("validate-scale", cmd_validate_scale, "out-of-time binomial and traffic-light checks")
    p.add_argument("--scale", required=True)
    p.add_argument("--scores", required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--min-count", type=int, default=50)
    p.add_argument("--max-flagged", type=int, default=1)
    p.add_argument("--out", required=True)

    p = add("explain", cmd_explain, "SHAP summary, dependence and waterfall data")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--row", type=int, default=0)
    p.add_argument("--top-n", type=int, default=10)
    p.add_argument("--feature")
    p.add_argument("--interaction")
    p.add_argument("--max-rows", type=int, default=2000)
    p.add_argument("--out", required=True)

    p = add("map-cr", cmd_map_cr, "map CR credit lines to snapshot rows")
    p.add_argument("--lines", required=True)
    p.add_argument("--phenomena")
    p.add_argument("--lookups")
    p.add_argument("--reference-month")
    p.add_argument("--allow-short-history", action="store_true")
    p.add_argument("--out", required=True)

    p = add("validate-mapping", cmd_validate_mapping, "paired CR vs bureau test battery")
    p.add_argument("--pairs")
    p.add_argument("--bureau")
    p.add_argument("--cr")
    p.add_argument("--battery")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--n", type=int, default=0, help="use only the first N pairs")
    p.add_argument("--out", required=True)

    p = add("backtest", cmd_backtest, "score CR-mapped snapshots against realised statuses")
    p.add_argument("--model", required=True)
    p.add_argument("--snapshots", required=True)
    p.add_argument("--statuses", required=True)
    p.add_argument("--native")
    p.add_argument("--threshold", type=float)
    p.add_argument("--allow-gaps", action="store_true")
    p.add_argument("--out", required=True)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    out = Path(args.out)
    try:
        files, config, inputs = args.func(args)
    except ValidationFailure as exc:
        message, files, inputs = exc.args
        write_manifest(args.command, args, {}, inputs, files, out, started)
        log.error("%s", message)
        return EXIT_FAILED
    except (FileNotFoundError, ValueError, KeyError, json.JSONDecodeError, pd.errors.ParserError,
            pd.errors.EmptyDataError, TypeError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except (calibrator.CalibrationError, ratingscale.InfeasibleScaleError) as exc:
        log.error("%s", exc)
        return EXIT_FAILED
    if args.seed is None:
        args.seed = 0
    write_manifest(args.command, args, config, inputs, files, out, started)
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
