"""Run the whole pipeline on a fresh synthetic bundle.

Generates a bundle, clusters and featurizes every trip, then trains, cross-validates,
ablates and builds the ETA tables. Every stage goes through the `bustop` CLI so the
outputs are exactly what the individual subcommands would write.

Output layout under OUT:
    bundle/            trips/, tiles/, manifest.json
    features/<trip>.csv
    model.json, profile.json
    eval.csv, topk.csv, ablation.csv, report.csv
    eta_table.csv, eta_daywise.csv

Usage:
    uv run python scripts/run_pipeline.py OUT [--stays-per-type N] [--seed S] [--n-jobs J]
"""

import argparse
import sys
from pathlib import Path

from bustop.main import run_command


def step(*argv: str) -> None:
    print(f"  $ bustop {' '.join(argv)}")
    status = run_command(list(argv))
    if status:
        sys.exit(status)


def run(out: Path, stays_per_type: int, seed: int, n_jobs: int) -> None:
    common = ["--seed", str(seed), "--n-jobs", str(n_jobs)]
    bundle = out / "bundle"
    step("synth", "--stays-per-type", str(stays_per_type), "--out", str(bundle), *common)

    trips = sorted(d for d in (bundle / "trips").iterdir() if d.is_dir())
    features_dir = out / "features"
    features_dir.mkdir(parents=True, exist_ok=True)
    features = []
    for trip in trips:
        step("cluster", "--trip", str(trip), *common)
        csv = features_dir / f"{trip.name}.csv"
        step("featurize", "--trip", str(trip), "--stays", str(trip / "stays.json"),
             "--tiles", str(bundle / "tiles"), "--out", str(csv), *common)  # fmt: skip
        # eta-table looks for per-trip features next to the stays
        (trip / "features.csv").write_bytes(csv.read_bytes())
        features.append(str(csv))
    stays = [str(trip / "stays.json") for trip in trips]

    step("profile", "--stays", *stays, "--out", str(out / "profile.json"), *common)
    step("train", "--features", *features, "--out", str(out / "model.json"), *common)
    step("eval", "--features", *features, "--holdout", "0.3", "--topk-out", str(out / "topk.csv"),
         "--out", str(out / "eval.csv"), *common)  # fmt: skip
    step("ablate", "--features", *features, "--out", str(out / "ablation.csv"), *common)
    step("report", "--features", *features, "--trips", str(bundle / "trips" / "*"),
         "--out", str(out / "report.csv"), *common)  # fmt: skip
    step("eta-table", "--trips", str(bundle / "trips" / "*"), "--profile", str(out / "profile.json"),
         "--model", str(out / "model.json"), "--daywise-out", str(out / "eta_daywise.csv"),
         "--out", str(out / "eta_table.csv"), *common)  # fmt: skip


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out", type=Path)
    parser.add_argument("--stays-per-type", type=int, default=20)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--n-jobs", type=int, default=1)
    args = parser.parse_args()
    print(f"Running pipeline into {args.out}")
    run(args.out, args.stays_per_type, args.seed, args.n_jobs)
    print("Done.")


if __name__ == "__main__":
    main()
