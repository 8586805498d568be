#!/usr/bin/env python3
"""F1 versus ensemble size for calibration-weighted fusion.

Fuses the testing split of the tuned synthetic corpus with weighted_ece over
growing member rosters (the 2 weakest members, then 3, 4, 5) and prints how
the fused F1 moves as members are added.

Usage:
    python3 scripts/ensemble_size_study.py --out runs/size_study [--threads N]
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from calfuse.cli import main as calfuse

# same corpus as scripts/method_comparison.py, weakest member first so each
# prefix is the hardest roster of its size
ROSTER = (
    ("alpha", 1.76, 0.58, 1.0),
    ("bravo", 1.84, 0.52, 1.0),
    ("charlie", 1.92, 0.47, 1.0),
    ("delta", 2.00, 0.44, 1.0),
    ("echo", 2.10, 0.40, 1.0),
)
SEED = 42
SIDE = 128
IMAGES = "0,8,12"


def run(argv: list[str]) -> None:
    code = calfuse(argv)
    if code != 0:
        raise SystemExit(code)


def fused_f1(report_path: Path) -> tuple[float, float]:
    doc = json.loads(report_path.read_text())
    f1 = doc["aggregate"]["f1"]
    return f1["mean"], f1["std"]


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/size_study")
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

    run(["calibrate", *manifest, "--out", str(out / "calibration"), *threads])

    rows = []
    for k in range(2, len(ROSTER) + 1):
        members = ",".join(model_id for model_id, *_ in ROSTER[:k])
        fused = out / f"fused_{k}"
        run(["fuse", *manifest, "--method", "weighted_ece", "--members", members,
             "--reports", str(out / "calibration"), "--out", str(fused), *threads])
        report = out / "eval" / f"k{k}.json"
        run(["evaluate", *manifest, "--pred-dir", str(fused),
             "--label", f"weighted_ece_k{k}", "--out", str(report), *threads])
        mean, std = fused_f1(report)
        rows.append((k, members, mean, std))

    print("\nmembers  f1_mean  f1_std   roster")
    for k, members, mean, std in rows:
        print(f"{k:>7}  {mean:.5f}  {std:.5f}  {members}")
    delta = rows[-1][2] - rows[0][2]
    print(f"\nF1(5) - F1(2) = {delta:+.5f}")

    table = out / "size_study.csv"
    with table.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["members", "f1_mean", "f1_std", "roster"])
        for k, members, mean, std in rows:
            writer.writerow([k, f"{mean:.17g}", f"{std:.17g}", members])
    print(f"wrote {table}")


if __name__ == "__main__":
    sys.exit(main())
