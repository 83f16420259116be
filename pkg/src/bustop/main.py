"""Command-line entry point: one subcommand per pipeline stage.

    synth         generate a synthetic bundle (trips, tiles, legend, manifest)
    ingest-check  validate a trip directory
    cluster       trip → stays.json (labeled from the trip's ground-truth marks)
    profile       stays.json files → profile.json (mean stay durations)
    featurize     trip + stays + tiles → features.csv
    tiles-check   verify the tile store covers every stay's box
    train         features → model.json
    eval          repeated stratified CV (optionally a hold-out split and top-k curves)
    ablate        CV with spatial, temporal and full feature groups
    predict       model + features → predicted stay types
    eta           arrival estimates along one trip
    eta-table     pairwise bus-stop error table and day/band error quartiles
    report        pilot statistics per stay type

Exit status is 0 on success, 2 on a usage error and 1 on a data error, which is reported
as a single `error<TAB><ExceptionName><TAB><message>` line on stderr.
"""

from __future__ import annotations

import argparse
import glob
import json
import re
import sys
from collections.abc import Callable, Sequence
from pathlib import Path

import humanize
import numpy as np
import pandas as pd
from loguru import logger

from . import config
from .config import PipelineConfig, get_config, load_config
from .eta import (
    StayProfile,
    build_chain,
    daywise_error,
    empirical_speed,
    eta_error_table,
    fit_stay_profile,
    predict_arrival,
)
from .features import FeatureRecord, featurize_trip, read_features, write_features
from .learner import (
    FEATURE_GROUPS,
    BuStopModel,
    Dataset,
    ablate_feature_groups,
    cross_validate,
    evaluate_holdout,
    holdout_split,
    predict_many,
    topk_curves,
    train_bustop,
)
from .mapenc import TileStore, check_coverage
from .models import BustopError, StayLocation, StayType
from .report import pilot_statistics, stay_snr
from .staypoint import find_stays, label_stays, read_stays, snap_route_positions, stay_odometers, write_stays
from .synth import SynthConfig, write_bundle
from .trace import parse_trip, validate_trace

LOG_FORMAT = "{time:YYYY-MM-DD HH:mm:ss} | {level: <8} | {name}:{function}:{line} - {message}"


class InvalidTrace(BustopError):
    def __init__(self, trip: Path, count: int) -> None:
        super().__init__(f"{trip}: {count} invariant violations")


def setup_logging(verbose: int, log_file: str | None) -> None:
    logger.remove()
    level = ("WARNING", "INFO", "DEBUG")[min(verbose, 2)]
    logger.add(sys.stderr, level=level, format="{level: <8} | {message}")
    if log_file:
        logger.add(log_file, rotation="10 MB", retention="7 days", level="DEBUG", format=LOG_FORMAT)


def cv_spec(text: str) -> tuple[int, int]:
    """Parse `<folds>x<repeats>`, e.g. 5x10."""
    match = re.fullmatch(r"(\d+)x(\d+)", text)
    if not match or int(match[1]) < 2 or int(match[2]) < 1:
        raise argparse.ArgumentTypeError(f"expected <folds>x<repeats> with folds ≥ 2, got {text!r}")
    return int(match[1]), int(match[2])


def fraction_spec(text: str) -> float | str:
    if text == "config":
        return text
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a fraction in (0, 1), got {text!r}") from None
    if not 0 < value < 1:
        raise argparse.ArgumentTypeError(f"test fraction must be in (0, 1), got {value}")
    return value


def speed_spec(text: str) -> float | str:
    if text == "empirical":
        return text
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"speed must be positive m/s or 'empirical', got {text!r}") from None
    if value <= 0:
        raise argparse.ArgumentTypeError(f"speed must be positive, got {value}")
    return value


def config_flags(args: argparse.Namespace) -> dict[str, object]:
    """Flag values that override config fields; `--speed empirical` is a mode, not a speed."""
    flags = vars(args).copy()
    if isinstance(flags.get("speed"), str):
        del flags["speed"]
    return flags


def trip_dirs(pattern: str) -> list[Path]:
    paths = sorted(Path(p) for p in glob.glob(pattern) if Path(p).is_dir())
    if not paths:
        raise BustopError(f"no trip directories match {pattern}")
    return paths


def _matrix(records: Sequence[FeatureRecord]) -> np.ndarray:
    return np.array([r.vector.as_array() for r in records], dtype=np.float64)


def load_dataset(paths: Sequence[str]) -> Dataset:
    records = [r for path in paths for r in read_features(path)]
    return Dataset.from_records(records)


# commands


def cmd_synth(args: argparse.Namespace, cfg: PipelineConfig) -> None:
    synth_cfg = SynthConfig(
        seed=cfg.seed,
        stays_per_type=args.stays_per_type,
        sites_per_type=args.sites_per_type,
        confounded_sites=args.confounded,
        exact=args.exact,
        utc_offset_min=cfg.utc_offset_min,
        zoom=cfg.zoom,
    )
    write_bundle(synth_cfg, args.out)


def cmd_ingest_check(args: argparse.Namespace, cfg: PipelineConfig) -> None:
    trace = parse_trip(args.trip, cfg.utc_offset_min)
    stays = read_stays(args.stays) if args.stays else None
    report = validate_trace(trace, stays, cfg.cluster_params().label_slack_s)
    counts = ", ".join(f"{k}={humanize.intcomma(v)}" for k, v in report.counts.items())
    print(f"{trace.trip_id}\t{counts}")
    for violation in report.violations:
        print(f"violation\t{violation.kind}\t{violation.detail}")
    if not report.ok:
        raise InvalidTrace(Path(args.trip), len(report.violations))


def cmd_cluster(args: argparse.Namespace, cfg: PipelineConfig) -> None:
    params = cfg.cluster_params()
    trace = parse_trip(args.trip, cfg.utc_offset_min)
    stays, _ = label_stays(find_stays(trace, params), trace.marks, params.label_slack_s)
    out = Path(args.out) if args.out else Path(args.trip) / "stays.json"
    write_stays(out, stays)
    logger.info(f"{trace.trip_id}: wrote {len(stays)} stays to {out}")


def cmd_profile(args: argparse.Namespace, cfg: PipelineConfig) -> None:
    stays = [s for path in args.stays for s in read_stays(path)]
    fit_stay_profile(stays).save(args.out)


def cmd_featurize(args: argparse.Namespace, cfg: PipelineConfig) -> None:
    trace = parse_trip(args.trip, cfg.utc_offset_min)
    stays = read_stays(args.stays)
    store = TileStore.open(args.tiles or cfg.tile_root or ".", cfg.zoom)
    records, _ = featurize_trip(trace, stays, store, cfg.feature_params(), cfg.n_jobs)
    write_features(args.out, records)


def cmd_tiles_check(args: argparse.Namespace, cfg: PipelineConfig) -> None:
    store = TileStore.open(args.tiles, cfg.zoom)
    centroids = [s.centroid for path in args.stays for s in read_stays(path)]
    missing = check_coverage(store, centroids, cfg.box_m, cfg.box_n)
    for tile in missing:
        print(f"missing\t{cfg.zoom}/{tile}.ppm")
    if missing:
        raise BustopError(f"{len(missing)} tiles missing for {len(centroids)} stays")
    print(f"ok\t{len(centroids)} stays covered")


def cmd_train(args: argparse.Namespace, cfg: PipelineConfig) -> None:
    dataset = load_dataset(args.features)
    model = train_bustop(dataset, cfg.learner_params(), cfg.n_jobs)
    model.save(args.out)
    logger.info(f"Trained on {humanize.intcomma(len(dataset))} stays, model written to {args.out}")


def cmd_eval(args: argparse.Namespace, cfg: PipelineConfig) -> None:
    dataset = load_dataset(args.features)
    folds, repeats = args.cv or (cfg.cv_folds, cfg.cv_repeats)
    frame = cross_validate(dataset, cfg.learner_params(), folds, repeats, n_jobs=cfg.n_jobs).to_frame()
    frame.insert(0, "protocol", "cv")
    if args.holdout is not None:
        fraction = cfg.test_fraction if args.holdout == "config" else float(args.holdout)
        train, test = holdout_split(dataset, fraction, cfg.seed)
        model = train_bustop(train, cfg.learner_params(), cfg.n_jobs)
        scores = evaluate_holdout(model, test)
        rows = pd.DataFrame([{"protocol": "holdout", "type": t.value, "f1_mean": f1} for t, f1 in scores.items()])
        frame = pd.concat([frame, rows], ignore_index=True)
        if args.topk_out:
            topk_curves(model).to_csv(args.topk_out, index=False)
    frame.to_csv(args.out, index=False, float_format="%.6f")


def cmd_ablate(args: argparse.Namespace, cfg: PipelineConfig) -> None:
    dataset = load_dataset(args.features)
    folds, repeats = args.cv or (cfg.cv_folds, cfg.cv_repeats)
    reports = ablate_feature_groups(dataset, cfg.learner_params(), folds, repeats, cfg.n_jobs)
    frame = pd.concat([reports[g].to_frame().assign(group=g) for g in FEATURE_GROUPS], ignore_index=True)
    frame[["group", "type", "f1_mean", "f1_sd"]].to_csv(args.out, index=False, float_format="%.6f")


def cmd_predict(args: argparse.Namespace, cfg: PipelineConfig) -> None:
    model = BuStopModel.load(args.model)
    records = [r for path in args.features for r in read_features(path)]
    predicted = predict_many(model, _matrix(records)) if records else []
    frame = pd.DataFrame(
        {
            "stay_id": [r.stay_id for r in records],
            "predicted": [StayType.format_set(p) for p in predicted],
            "truth": [StayType.format_set(r.labels) for r in records],
        }
    )
    frame.to_csv(args.out, index=False)


def _predictions(model: BuStopModel | None, features: Path) -> dict[str, frozenset[StayType]]:
    if model is None or not features.exists():
        return {}
    records = read_features(features)
    if not records:
        return {}
    return {r.stay_id: p for r, p in zip(records, predict_many(model, _matrix(records)))}


def cmd_eta(args: argparse.Namespace, cfg: PipelineConfig) -> None:
    trace = parse_trip(args.trip, cfg.utc_offset_min)
    stays = read_stays(args.stays) if args.stays else read_stays(Path(args.trip) / "stays.json")
    profile = StayProfile.load(args.profile)
    model = BuStopModel.load(args.model) if args.model else None
    features = Path(args.features) if args.features else Path(args.trip) / "features.csv"
    predicted = _predictions(model, features)
    if model is not None:
        predicted = {s.stay_id: predicted.get(s.stay_id, frozenset()) for s in stays}
    speed = empirical_speed(trace, cfg.chi) if args.speed == "empirical" else (args.speed or cfg.speed)
    chain = build_chain(trace.trip_id, stays, predicted, utc_offset_min=trace.utc_offset_min)
    if not chain.stops:
        raise BustopError(f"{trace.trip_id}: no stays to chain")
    estimates = predict_arrival(chain, chain.stops[0].actual_arrival, profile, speed)
    frame = pd.DataFrame(
        [
            {
                "stay_id": e.stay_id,
                "predicted_arrival_ms": round(e.predicted_arrival),
                "actual_arrival_ms": stop.actual_arrival,
                "error_min": e.error_min,
                "misclassified": e.misclassified,
            }
            for e, stop in zip(estimates, chain.stops)
        ]
    )
    frame.to_csv(args.out, index=False, float_format="%.6f")


def cmd_eta_table(args: argparse.Namespace, cfg: PipelineConfig) -> None:
    params = cfg.cluster_params()
    model = BuStopModel.load(args.model) if args.model else None
    trips: dict[str, tuple[str, int, list[StayLocation], dict]] = {}
    odometers: dict[str, float] = {}
    for trip in trip_dirs(args.trips):
        trace = parse_trip(trip, cfg.utc_offset_min)
        stays_path = trip / "stays.json"
        if stays_path.exists():
            stays = read_stays(stays_path)
        else:
            stays, _ = label_stays(find_stays(trace, params), trace.marks, params.label_slack_s)
        odometers.update(stay_odometers(trace, stays))
        predicted = _predictions(model, trip / "features.csv")
        trips[trace.trip_id] = (trace.direction.value, trace.utc_offset_min, stays, predicted)
    chains = []
    for direction in sorted({d for d, *_ in trips.values()}):
        same = {k: v for k, v in trips.items() if v[0] == direction}
        positions = snap_route_positions([v[2] for v in same.values()], odometers, cfg.rho)
        for trip_id, (_, offset, stays, predicted) in same.items():
            chains.append(build_chain(trip_id, stays, predicted or None, positions, offset))
    if args.profile:
        profile = StayProfile.load(args.profile)
    else:
        profile = fit_stay_profile([s for _, _, trip_stays, _ in trips.values() for s in trip_stays])
        logger.info(f"No --profile given, fitted stay durations from {len(trips)} trips")
    table = eta_error_table(chains, profile, cfg.speed)
    table.to_csv(args.out)
    if table.misclassified:
        logger.info(f"Misclassified bus-stops: {', '.join(sorted(table.misclassified))}")
    if args.daywise_out:
        daywise_error(chains, profile, cfg.speed).to_csv(args.daywise_out, index=False, float_format="%.6f")


def cmd_report(args: argparse.Namespace, cfg: PipelineConfig) -> None:
    records = [r for path in args.features for r in read_features(path)]
    snr: dict[str, float] = {}
    if args.trips:
        for trip in trip_dirs(args.trips):
            trace = parse_trip(trip, cfg.utc_offset_min)
            stays_path = trip / "stays.json"
            if stays_path.exists():
                snr.update(stay_snr(trace, read_stays(stays_path), cfg.mfcc_config()))
    table, notes = pilot_statistics(records, snr)
    table.to_csv(args.out, index=False, float_format="%.6f")
    notes_out = Path(args.notes_out) if args.notes_out else Path(args.out).with_suffix(".notes.txt")
    notes_out.write_text("".join(f"{note}\n" for note in notes), encoding="utf-8")


# parser


def _common() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON config file")
    common.add_argument("--print-config", action="store_true", help="print the resolved config as JSON")
    common.add_argument("--log-file", help="also log to this file (rotated at 10 MB)")
    common.add_argument("-v", "--verbose", action="count", default=0)
    common.add_argument("--seed", type=int)
    common.add_argument("--n-jobs", type=int, dest="n_jobs")
    common.add_argument("--chi", type=float)
    common.add_argument("--rho", type=float)
    common.add_argument("--utc-offset-min", type=int, dest="utc_offset_min")
    common.add_argument("--zoom", type=int)
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="bustop", description="Bus stay-location characterization and ETA")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, handler: Callable[[argparse.Namespace, PipelineConfig], None], help: str):
        p = sub.add_parser(name, parents=[common], help=help)
        p.set_defaults(handler=handler)
        return p

    p = command("synth", cmd_synth, "generate a synthetic bundle")
    p.add_argument("--stays-per-type", type=int, default=20)
    p.add_argument("--sites-per-type", type=int, default=5)
    p.add_argument("--confounded", type=int, default=0, help="number of BusStop|Signal sites")
    p.add_argument("--exact", action="store_true", help="durations equal band means, speed exactly 17 m/s")
    p.add_argument("--out", required=True)

    p = command("ingest-check", cmd_ingest_check, "validate a trip directory")
    p.add_argument("--trip", required=True)
    p.add_argument("--stays", help="stays.json to check ground-truth marks against")

    p = command("cluster", cmd_cluster, "detect stay-locations in a trip")
    p.add_argument("--trip", required=True)
    p.add_argument("--out", help="default: <trip>/stays.json")

    p = command("profile", cmd_profile, "fit mean stay durations from labeled stays")
    p.add_argument("--stays", nargs="+", required=True)
    p.add_argument("--out", required=True)

    p = command("featurize", cmd_featurize, "compute feature vectors for a trip's stays")
    p.add_argument("--trip", required=True)
    p.add_argument("--stays", required=True)
    p.add_argument("--tiles", help="tile store root (default: tile_root from config)")
    p.add_argument("--out", required=True)

    p = command("tiles-check", cmd_tiles_check, "check tile coverage for stays")
    p.add_argument("tiles")
    p.add_argument("--stays", nargs="+", required=True)

    p = command("train", cmd_train, "train the five one-vs-all models")
    p.add_argument("--features", nargs="+", required=True)
    p.add_argument("--out", required=True)

    p = command("eval", cmd_eval, "cross-validate (and optionally hold out)")
    p.add_argument("--features", nargs="+", required=True)
    p.add_argument("--cv", type=cv_spec, help="<folds>x<repeats> (default: cv_folds x cv_repeats from config)")
    p.add_argument(
        "--holdout",
        type=fraction_spec,
        nargs="?",
        const="config",
        help="also train on a stratified split and score this test fraction (default: test_fraction)",
    )
    p.add_argument("--topk-out", help="with --holdout: write the OOB F1 vs top-k curve here")
    p.add_argument("--out", required=True)

    p = command("ablate", cmd_ablate, "cross-validate spatial, temporal and full feature groups")
    p.add_argument("--features", nargs="+", required=True)
    p.add_argument("--cv", type=cv_spec)
    p.add_argument("--out", required=True)

    p = command("predict", cmd_predict, "predict stay types")
    p.add_argument("--model", required=True)
    p.add_argument("--features", nargs="+", required=True)
    p.add_argument("--out", required=True)

    p = command("eta", cmd_eta, "estimate arrival times along a trip")
    p.add_argument("--trip", required=True)
    p.add_argument("--profile", required=True)
    p.add_argument("--model", help="use predicted stay types (default: ground truth)")
    p.add_argument("--stays", help="default: <trip>/stays.json")
    p.add_argument("--features", help="default: <trip>/features.csv")
    p.add_argument("--speed", type=speed_spec, help="m/s or 'empirical' (default: config speed)")
    p.add_argument("--out", required=True)

    p = command("eta-table", cmd_eta_table, "pairwise bus-stop ETA errors")
    p.add_argument("--trips", required=True, help="glob of trip directories")
    p.add_argument("--profile", help="default: fit from the labeled stays of --trips")
    p.add_argument("--model")
    p.add_argument("--daywise-out", help="also write day/band error quartiles here")
    p.add_argument("--out", required=True)

    p = command("report", cmd_report, "pilot statistics per stay type")
    p.add_argument("--features", nargs="+", required=True)
    p.add_argument("--trips", help="glob of trip directories with stays.json, for SNR")
    p.add_argument("--out", required=True)
    p.add_argument("--notes-out", help="omitted type/statistic combinations (default: <out>.notes.txt)")
    return parser


def run_command(argv: Sequence[str] | None = None) -> int:
    """Run one subcommand; returns the process exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    setup_logging(args.verbose, args.log_file)
    try:
        config.CONFIG = load_config(config_flags(args), args.config)
        cfg = get_config()
        if args.print_config:
            print(json.dumps(cfg.to_json(), indent=1, sort_keys=True))
        logger.debug(f"bustop {args.command}: seed={cfg.seed}")
        args.handler(args, cfg)
    except BustopError as e:
        logger.debug(f"{args.command} failed: {e!r}")
        print(f"error\t{type(e).__name__}\t{e}", file=sys.stderr)
        return 1
    return 0


def main():
    """Main entry point for bustop."""
    sys.exit(run_command())


if __name__ == "__main__":
    main()
