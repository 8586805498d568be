"""Command line wrapper: one invocation converts one source tree.

Exit codes: 0 success, 1 bad arguments or source data violating the export
contract, 2 corrupt files reported by the downstream reader.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from calfuse import DataError, ValidationError

from .export import DEFAULT_RATIOS, ExportError, ExportJob, run_export


def _parse_classes(text: str) -> tuple[str, ...]:
    names = tuple(part.strip() for part in text.split(","))
    if any(not name for name in names):
        raise ExportError(f"--classes needs comma-separated names, got {text!r}")
    return names


def _parse_ratios(text: str) -> tuple[int, int, int]:
    parts = text.split(",")
    try:
        ratios = tuple(int(part) for part in parts)
    except ValueError:
        raise ExportError(
            f"--split needs three integers like 70,10,20, got {text!r}"
        ) from None
    if len(ratios) != 3:
        raise ExportError(f"--split needs three integers like 70,10,20, got {text!r}")
    return ratios


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cbpm-export",
        description="Export a tree of .npy prediction arrays and PNG masks "
        "into a calfuse dataset (cbpm files, remapped masks, manifest).",
    )
    parser.add_argument("--source", required=True, help="source tree root")
    parser.add_argument("--dest", required=True, help="destination dataset root")
    parser.add_argument("--classes", default="NonLung,Lung",
                        help="comma-separated class names, background first")
    parser.add_argument("--split", default=",".join(str(r) for r in DEFAULT_RATIOS),
                        help="training,validation,testing ratio")
    parser.add_argument("--seed", type=int, default=0, help="split assignment seed")
    return parser


def main(argv=None) -> int:
    try:
        try:
            args = build_parser().parse_args(argv)
        except SystemExit as exc:
            return 0 if exc.code == 0 else 1
        job = ExportJob(
            source=Path(args.source),
            dest=Path(args.dest),
            class_names=_parse_classes(args.classes),
            ratios=_parse_ratios(args.split),
            seed=args.seed,
        )
        manifest = run_export(job)
    except (ExportError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(manifest)
    return 0


def entry() -> None:
    sys.exit(main())
