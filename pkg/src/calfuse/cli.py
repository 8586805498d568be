"""Command-line pipeline: synth, calibrate, fuse, evaluate, overlay, report.

Exit codes: 0 on success, 1 for usage or validation problems (bad flags,
manifest inconsistencies, missing files), 2 for I/O failures or corrupt data
files. ``--threads`` (default from CALFUSE_THREADS, else 1) parallelizes
per-image work; results are reduced in manifest order, so thread count
changes wall time but never output bytes.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import calibration, fusion, metrics, synth
from .tensor_store import (
    SPLIT_NAMES,
    DataError,
    LabelMask,
    Manifest,
    ValidationError,
    check_mask_classes,
    load_manifest,
    read_mask,
    read_probmap,
    write_mask,
)

THREADS_ENV = "CALFUSE_THREADS"

# overlay palette: true negative, any incorrect, true positive
COLOR_TN = (128, 0, 128)
COLOR_WRONG = (255, 255, 0)
COLOR_TP = (0, 255, 0)


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors by default; this tool reserves 2 for
    # I/O and data corruption, so usage problems exit 1 instead
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    return max(n, 1)


def _make_mapper(threads: int, stack) -> Callable:
    if threads <= 1:
        return map
    pool = stack.enter_context(ThreadPoolExecutor(max_workers=threads))
    return pool.map


def _write_json(doc: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2) + "\n", "utf-8")


def _load_json(path: Path) -> dict:
    try:
        return json.loads(Path(path).read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid JSON ({exc})") from exc


def _percent(x: float | None) -> str:
    return "" if x is None else f"{100.0 * x:.2f}"


def cmd_synth(args) -> int:
    if args.spec:
        spec = synth.SynthSpec.from_dict(_load_json(Path(args.spec)))
        if args.seed is not None:
            spec.seed = args.seed
    else:
        if not args.models:
            raise ValidationError("synth needs --spec or at least one --model")
        counts = [int(x) for x in args.images.split(",")]
        if len(counts) != 3:
            raise ValidationError("--images takes three comma-separated counts")
        models = []
        for text in args.models:
            parts = text.split(":")
            if len(parts) != 4:
                raise ValidationError(
                    f"--model must look like id:skill:temperature:noise, got {text!r}"
                )
            models.append(
                synth.SynthModel(parts[0], float(parts[1]), float(parts[2]), float(parts[3]))
            )
        spec = synth.SynthSpec(
            args.height,
            args.width,
            args.seed if args.seed is not None else 0,
            dict(zip(SPLIT_NAMES, counts)),
            models,
        )
    spec.validate()
    manifest_path = synth.gen_dataset(spec, Path(args.out))
    _write_json(spec.to_dict(), Path(args.out) / "synth_spec.json")
    print(manifest_path)
    return 0


def _calibrate_all(
    manifest: Manifest, model_ids: Sequence[str], split: str, k_bins: int, mapper
) -> dict[str, calibration.CalibrationReport]:
    return {
        model_id: calibration.calibrate_model(model_id, split, manifest, k_bins, mapper=mapper)
        for model_id in model_ids
    }


def cmd_calibrate(args) -> int:
    manifest = load_manifest(args.manifest)
    model_ids = args.members.split(",") if args.members else manifest.model_ids()
    out = Path(args.out)
    with contextlib.ExitStack() as stack:
        mapper = _make_mapper(args.threads, stack)
        reports = _calibrate_all(manifest, model_ids, args.split, args.bins, mapper)
    for model_id, report in reports.items():
        _write_json(calibration.report_to_dict(report), out / f"{model_id}.calibration.json")
        (out / f"{model_id}.reliability.csv").write_text(
            calibration.reliability_csv(report), "utf-8"
        )
        print(f"{model_id}: ece={report.ece:.6f} mce={report.mce:.6f} n={report.total}")
    return 0


def _load_reports_dir(path: Path) -> dict[str, calibration.CalibrationReport]:
    reports = {}
    for file in sorted(path.glob("*.calibration.json")):
        report = calibration.report_from_dict(_load_json(file))
        reports[report.model_id] = report
    if not reports:
        raise ValidationError(f"no *.calibration.json files under {path}")
    return reports


def _ensemble_report(
    label: str,
    entries,
    tables: Sequence[calibration.BinTable],
    k_bins: int,
) -> calibration.CalibrationReport:
    per_image = [
        (entry.image_id, calibration.result_from_table(t).ece)
        for entry, t in zip(entries, tables)
    ]
    pooled = calibration.BinTable.empty(k_bins)
    for t in tables:  # manifest order
        pooled.merge(t)
    return calibration.report_from_table(label, pooled, per_image)


def cmd_fuse(args) -> int:
    manifest = load_manifest(args.manifest)
    members = args.members.split(",") if args.members else manifest.model_ids()
    config = fusion.FusionConfig(
        method=args.method, members=members, k_bins=args.bins, ce_floor=args.epsilon
    )
    config.validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = manifest.split(args.split)
    if not entries:
        raise ValidationError(f"split {args.split!r} has no images")

    with contextlib.ExitStack() as stack:
        mapper = _make_mapper(args.threads, stack)
        reports = None
        if config.method != "majority":
            if args.reports:
                reports = _load_reports_dir(Path(args.reports))
            else:
                # implicit calibration on the validation split
                reports = _calibrate_all(manifest, members, "validation", args.bins, mapper)

        def fuse_one(entry):
            fused = fusion.fuse_image_full(
                entry.image_id, config, manifest, reports, split=args.split
            )
            write_mask(fused.mask, out / f"{entry.image_id}.png")
            truth = read_mask(entry.mask_path)
            check_mask_classes(truth, manifest.classes, context=entry.image_id)
            table = calibration.BinTable.empty(args.bins)
            table.add_float64(fused.confidence, fused.mask.data == truth.data)
            return table

        tables = list(mapper(fuse_one, entries))

    ens_report = _ensemble_report(config.method, entries, tables, args.bins)
    _write_json(calibration.report_to_dict(ens_report), out / "ensemble.calibration.json")

    log: dict = {
        "format_version": 1,
        "method": config.method,
        "split": args.split,
        "members": members,
        "bins": args.bins,
        "epsilon": config.ce_floor,
        "tie_rule": config.tie_rule,
        "images": len(entries),
    }
    if reports is not None:
        for tag in ("ece", "mce"):
            weights = fusion.derive_weights(
                [reports[m] for m in members], f"weighted_{tag}", config.ce_floor
            )
            log[f"validation_{tag}"] = {w.model_id: w.ce for w in weights}
            log[f"weights_{tag}"] = {w.model_id: w.weight for w in weights}
    _write_json(log, out / "fusion_run.json")
    print(f"{config.method}: fused {len(entries)} images -> {out}")
    return 0


def _argmax_mask(model_id: str, split: str, image_id: str, manifest: Manifest) -> LabelMask:
    probmap = read_probmap(manifest.prediction_path(model_id, split, image_id))
    pred = np.argmax(probmap.data, axis=2).astype(np.uint8)
    return LabelMask(probmap.height, probmap.width, pred, classes=probmap.classes)


def cmd_evaluate(args) -> int:
    manifest = load_manifest(args.manifest)
    if bool(args.model) == bool(args.pred_dir):
        raise ValidationError("evaluate needs exactly one of --model or --pred-dir")
    entries = manifest.split(args.split)
    if not entries:
        raise ValidationError(f"split {args.split!r} has no images")
    positive = manifest.class_index(args.positive_class)
    label = args.label or (args.model if args.model else Path(args.pred_dir).name)
    if args.model:
        manifest.model(args.model)

    with contextlib.ExitStack() as stack:
        mapper = _make_mapper(args.threads, stack)

        def eval_one(entry):
            truth = read_mask(entry.mask_path)
            check_mask_classes(truth, manifest.classes, context=entry.image_id)
            if args.model:
                pred = _argmax_mask(args.model, args.split, entry.image_id, manifest)
            else:
                pred_path = Path(args.pred_dir) / f"{entry.image_id}.png"
                if not pred_path.is_file():
                    raise ValidationError(f"missing prediction mask {pred_path}")
                pred = read_mask(pred_path)
                check_mask_classes(pred, manifest.classes, context=entry.image_id)
            counts = metrics.confusion(pred, truth, positive)
            return counts, metrics.metrics_from_counts(counts)

        results = list(mapper(eval_one, entries))

    rows = [(e.image_id, c, m) for e, (c, m) in zip(entries, results)]
    report = metrics.build_eval_report(label, positive, rows)
    if args.out:
        _write_json(report, Path(args.out))
    agg = report["aggregate"]
    line = " ".join(
        f"{name}={_percent(agg[name]['mean'])}" for name in metrics.METRIC_NAMES
    )
    print(f"{label}: {line}")
    return 0


def cmd_overlay(args) -> int:
    from PIL import Image

    pred = read_mask(args.pred)
    truth = read_mask(args.truth)
    if (pred.height, pred.width) != (truth.height, truth.width):
        raise ValidationError(
            f"dimension mismatch: prediction {pred.height}x{pred.width} "
            f"vs truth {truth.height}x{truth.width}"
        )
    try:
        positive = int(args.positive_class)
    except ValueError:
        raise ValidationError(
            f"--positive-class must be an integer index here, got {args.positive_class!r}"
        ) from None
    p = pred.data == positive
    t = truth.data == positive
    rgb = np.zeros((pred.height, pred.width, 3), dtype=np.uint8)
    rgb[~p & ~t] = COLOR_TN
    rgb[p != t] = COLOR_WRONG
    rgb[p & t] = COLOR_TP
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rgb, mode="RGB").save(args.out, format="PNG")
    print(args.out)
    return 0


def cmd_report(args) -> int:
    rows: list[tuple[str, str, str, str, str, str]] = []
    text_rows: list[tuple[str, dict[str, str]]] = []
    calib_by_label: dict[str, dict] = {}
    for path in args.calibration or []:
        doc = _load_json(Path(path))
        calibration.report_from_dict(doc)  # validate shape
        calib_by_label[doc["model_id"]] = doc

    for path in args.eval:
        doc = _load_json(Path(path))
        if doc.get("format_version") != 1:
            raise DataError(f"{path}: unsupported eval report version")
        label = doc["method"]
        agg = doc["aggregate"]
        cells: dict[str, str] = {}
        for name in metrics.METRIC_NAMES:
            a = agg[name]
            mean = "" if a["mean"] is None else repr(a["mean"])
            std = "" if a["std"] is None else repr(a["std"])
            rows.append((label, name, mean, std, str(a["included"]), str(a["excluded"])))
            if a["mean"] is not None:
                cells[name] = f"{100 * a['mean']:.2f}+-{100 * a['std']:.2f}"
        calib = calib_by_label.get(label)
        if calib is not None:
            per_image = [p["ece"] for p in calib["per_image"]]
            n = len(per_image)
            mean = math.fsum(per_image) / n
            std = 0.0 if n == 1 else math.sqrt(
                math.fsum((v - mean) ** 2 for v in per_image) / (n - 1)
            )
            rows.append((label, "ece", repr(mean), repr(std), str(n), "0"))
            rows.append((label, "ece_corpus", repr(calib["ece"]), "", str(n), "0"))
            rows.append((label, "mce_corpus", repr(calib["mce"]), "", str(n), "0"))
            cells["ece"] = f"{100 * mean:.2f}+-{100 * std:.2f}"
            cells["mce"] = f"{100 * calib['mce']:.2f}"
        text_rows.append((label, cells))

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "metric", "mean", "std", "included", "excluded"])
    writer.writerows(rows)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(buf.getvalue(), "utf-8")

    headers = ["method", "accuracy", "sensitivity", "specificity", "f1", "ece", "mce"]
    widths = {h: len(h) for h in headers}
    lines = []
    for label, cells in text_rows:
        line = {"method": label, **cells}
        for h in headers:
            widths[h] = max(widths[h], len(line.get(h, "")))
        lines.append(line)
    header = "  ".join(h.ljust(widths[h]) for h in headers)
    print(header)
    print("-" * len(header))
    for line in lines:
        print("  ".join(line.get(h, "").ljust(widths[h]) for h in headers))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="calfuse", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, split_default):
        p.add_argument("--manifest", required=True, help="dataset manifest JSON")
        p.add_argument("--split", default=split_default, choices=SPLIT_NAMES)
        p.add_argument("--threads", type=int, default=_default_threads())

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--spec", help="SynthSpec JSON file")
    p.add_argument("--model", dest="models", action="append", default=[],
                   metavar="ID:SKILL:TEMP:NOISE")
    p.add_argument("--images", default="10,2,4", help="training,validation,testing counts")
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("calibrate", help="per-model reliability reports")
    common(p, "validation")
    p.add_argument("--members", help="comma-separated model ids (default: all)")
    p.add_argument("--bins", type=int, default=calibration.DEFAULT_BINS)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("fuse", help="fuse member predictions into masks")
    common(p, "testing")
    p.add_argument("--method", required=True, choices=fusion.METHODS)
    p.add_argument("--members", help="comma-separated model ids (default: all)")
    p.add_argument("--bins", type=int, default=calibration.DEFAULT_BINS)
    p.add_argument("--epsilon", type=float, default=fusion.CE_FLOOR)
    p.add_argument("--reports", help="directory of *.calibration.json (default: calibrate "
                                     "the validation split on the fly)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("evaluate", help="segmentation metrics against ground truth")
    common(p, "testing")
    p.add_argument("--model", help="evaluate this model's argmax masks")
    p.add_argument("--pred-dir", help="evaluate fused masks from this directory")
    p.add_argument("--positive-class", default="1")
    p.add_argument("--label", help="method name recorded in the report")
    p.add_argument("--out", help="write the EvalReport JSON here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("overlay", help="color-coded prediction vs truth PNG")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--positive-class", default="1")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_overlay)

    p = sub.add_parser("report", help="combine reports into a comparison table")
    p.add_argument("--eval", nargs="+", required=True, help="EvalReport JSON files")
    p.add_argument("--calibration", nargs="*", help="calibration report JSON files")
    p.add_argument("--out", help="write the CSV table here")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())
