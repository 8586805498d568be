#!/usr/bin/env python3
"""Member-vs-ensemble comparison table on the tuned synthetic corpus.

Generates the five-member corpus (seed 42, 128x128), calibrates every member
on the validation split, fuses the testing split with every method, evaluates
everything, and prints one table: per-member and per-method accuracy,
sensitivity, specificity, F1, and calibration errors on held-out data.

Usage:
    python3 scripts/method_comparison.py --out runs/comparison [--threads N]
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from calfuse.cli import main as calfuse
from calfuse.fusion import METHODS

# tuned so member F1 spans roughly 90-95% and member ECE roughly 2-6% on the
# testing split; listed weakest first (see scripts/ensemble_size_study.py)
ROSTER = (
    ("alpha", 1.76, 0.58, 1.0),
    ("bravo", 1.84, 0.52, 1.0),
    ("charlie", 1.92, 0.47, 1.0),
    ("delta", 2.00, 0.44, 1.0),
    ("echo", 2.10, 0.40, 1.0),
)
SEED = 42
SIDE = 128
IMAGES = "0,8,12"  # training,validation,testing


def run(argv: list[str]) -> None:
    code = calfuse(argv)
    if code != 0:
        raise SystemExit(code)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/comparison")
    parser.add_argument("--threads", type=int, default=1)
    args = parser.parse_args()

    out = Path(args.out)
    data = out / "data"
    threads = ["--threads", str(args.threads)]

    synth = ["synth", "--out", str(data), "--seed", str(SEED),
             "--height", str(SIDE), "--width", str(SIDE), "--images", IMAGES]
    for model_id, skill, temp, noise in ROSTER:
        synth += ["--model", f"{model_id}:{skill}:{temp}:{noise}"]
    run(synth)
    manifest = ["--manifest", str(data / "manifest.json")]

    # validation calibration drives the fusion weights; testing calibration
    # supplies the held-out ECE/MCE columns of the table
    run(["calibrate", *manifest, "--split", "validation",
         "--out", str(out / "calibration"), *threads])
    run(["calibrate", *manifest, "--split", "testing",
         "--out", str(out / "test_calibration"), *threads])

    evals = []
    calibs = sorted(str(p) for p in (out / "test_calibration").glob("*.calibration.json"))
    for model_id, *_ in ROSTER:
        report = out / "eval" / f"{model_id}.json"
        run(["evaluate", *manifest, "--model", model_id, "--out", str(report), *threads])
        evals.append(str(report))

    for method in METHODS:
        fused = out / f"fused_{method}"
        run(["fuse", *manifest, "--method", method,
             "--reports", str(out / "calibration"), "--out", str(fused), *threads])
        report = out / "eval" / f"{method}.json"
        run(["evaluate", *manifest, "--pred-dir", str(fused), "--label", method,
             "--out", str(report), *threads])
        evals.append(str(report))
        calibs.append(str(fused / "ensemble.calibration.json"))

    run(["report", "--eval", *evals, "--calibration", *calibs,
         "--out", str(out / "comparison.csv")])
    print(f"\nwrote {out / 'comparison.csv'}")


if __name__ == "__main__":
    sys.exit(main())
