"""Expected and maximum calibration error over binned pixel confidences.

Bins are right-closed equal-width intervals ((k-1)/K, k/K] for k = 1..K;
a confidence of exactly 0 joins bin 1. Per-bin state is three mergeable
quantities: pair count, correct count, and the confidence sum. The first two
are plain integers. The confidence sum is kept as an exact integer on the
dyadic grid 2**-1074 (every finite float64 is an integer multiple of that),
so accumulation never rounds. That makes ece and mce bitwise independent of
pair order and lets sub-population tables merge without loss. Reported
accuracy, confidence, ece, and mce are float64, rounded once at the end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .tensor_store import (
    LabelMask,
    Manifest,
    ProbMap,
    ValidationError,
    check_mask_classes,
    read_mask,
    read_probmap,
)

DEFAULT_BINS = 10

_GRID_BITS = 1074  # 2**-1074 is the smallest positive float64
_F32_GRID_BITS = 149  # and 2**-149 the smallest positive float32


def bin_index(confidence: float, k_bins: int) -> int:
    """Index (1-based) of the bin ((k-1)/K, k/K] holding ``confidence``.

    Confidence 0 maps to bin 1. The boundary comparison is done in exact
    integer arithmetic, so a value sitting on k/K in real terms never lands
    in the wrong bin through rounding of confidence * K.
    """
    if k_bins < 1:
        raise ValidationError(f"bin count must be >= 1, got {k_bins}")
    confidence = float(confidence)
    if not 0.0 <= confidence <= 1.0:
        raise ValidationError(f"confidence {confidence!r} outside [0, 1]")
    num, den = confidence.as_integer_ratio()
    q, r = divmod(num * k_bins, den)
    k = q if r == 0 else q + 1
    return max(k, 1)


def _dyadic_units(value: float) -> int:
    # exact numerator of value on the 2**-1074 grid
    num, den = value.as_integer_ratio()
    return num << (_GRID_BITS - (den.bit_length() - 1))


@dataclass
class BinTable:
    """Mergeable per-bin accumulator; slot i holds bin i+1."""

    k_bins: int
    count: list[int]
    correct: list[int]
    conf_units: list[int]

    @classmethod
    def empty(cls, k_bins: int) -> "BinTable":
        if k_bins < 1:
            raise ValidationError(f"bin count must be >= 1, got {k_bins}")
        return cls(k_bins, [0] * k_bins, [0] * k_bins, [0] * k_bins)

    @property
    def total(self) -> int:
        return sum(self.count)

    def merge(self, other: "BinTable") -> None:
        if other.k_bins != self.k_bins:
            raise ValidationError(
                f"cannot merge tables with {other.k_bins} and {self.k_bins} bins"
            )
        for i in range(self.k_bins):
            self.count[i] += other.count[i]
            self.correct[i] += other.correct[i]
            self.conf_units[i] += other.conf_units[i]

    def add_float64(self, conf: np.ndarray, correct: np.ndarray) -> None:
        """Accumulate float64 confidences exactly via their unique values."""
        conf = np.asarray(conf, dtype=np.float64).ravel()
        corr = np.asarray(correct, dtype=bool).ravel()
        if conf.shape != corr.shape:
            raise ValidationError("confidence and correctness streams differ in length")
        uniq, inverse = np.unique(conf, return_inverse=True)
        n_u = np.bincount(inverse, minlength=uniq.size)
        c_u = np.bincount(inverse[corr], minlength=uniq.size)
        for v, n, c in zip(uniq.tolist(), n_u.tolist(), c_u.tolist()):
            i = bin_index(v, self.k_bins) - 1
            self.count[i] += n
            self.correct[i] += c
            self.conf_units[i] += _dyadic_units(v) * n

    def add_float32(self, conf: np.ndarray, correct: np.ndarray) -> None:
        """Vectorized exact path for float32 confidence images.

        Binning stays exact because a float32 carries at most 24 mantissa
        bits, so conf * k_bins is computed without rounding in float64 for
        any realistic bin count. Confidence sums group mantissas by exponent
        (partial sums stay below 2**53, hence exact in float64) and combine
        the groups as big integers.
        """
        conf = np.ascontiguousarray(conf, dtype=np.float32).ravel()
        corr = np.asarray(correct, dtype=bool).ravel()
        if conf.shape != corr.shape:
            raise ValidationError("confidence and correctness streams differ in length")
        if conf.size == 0:
            return
        if self.k_bins > (1 << 24):
            self.add_float64(conf.astype(np.float64), corr)
            return
        lo, hi = float(conf.min()), float(conf.max())
        if lo < 0.0 or hi > 1.0:
            raise ValidationError(f"confidence values span [{lo}, {hi}], outside [0, 1]")

        y = conf.astype(np.float64) * self.k_bins  # exact product
        slots = np.ceil(y).astype(np.int64) - 1
        np.maximum(slots, 0, out=slots)

        bits = conf.view(np.uint32).astype(np.int64)
        exp = bits >> 23
        mant = bits & 0x7FFFFF
        mant[exp > 0] |= 1 << 23

        key = slots * 256 + exp
        msum = np.bincount(key, weights=mant.astype(np.float64), minlength=self.k_bins * 256)
        nsum = np.bincount(slots, minlength=self.k_bins)
        csum = np.bincount(slots[corr], minlength=self.k_bins)

        lift = _GRID_BITS - _F32_GRID_BITS
        for flat in np.nonzero(msum)[0].tolist():
            i, e = divmod(flat, 256)
            m = int(msum[flat])
            # float32 value reassembled: mantissa * 2**(e-150) for normals,
            # mantissa * 2**-149 for subnormals; expressed in 2**-149 units
            units = (m << (e - 1)) if e else m
            self.conf_units[i] += units << lift
        for i in range(self.k_bins):
            self.count[i] += int(nsum[i])
            self.correct[i] += int(csum[i])


@dataclass(frozen=True)
class BinStat:
    """Reported statistics for one bin; accuracy and confidence are None when empty."""

    index: int
    lower: float
    upper: float
    count: int
    accuracy: float | None
    confidence: float | None


@dataclass(frozen=True)
class CalibrationResult:
    k_bins: int
    total: int
    bins: tuple[BinStat, ...]
    ece: float
    mce: float


def _bin_stats(table: BinTable) -> tuple[BinStat, ...]:
    k = table.k_bins
    out = []
    for i in range(k):
        n = table.count[i]
        if n:
            acc = table.correct[i] / n
            conf = float(Fraction(table.conf_units[i], n << _GRID_BITS))
        else:
            acc = conf = None
        out.append(BinStat(i + 1, i / k, (i + 1) / k, n, acc, conf))
    return tuple(out)


def result_from_table(table: BinTable) -> CalibrationResult:
    total = table.total
    if total < 1:
        raise ValidationError("calibration needs at least one (confidence, correct) pair")
    bins = _bin_stats(table)
    gaps = [(b.count, abs(b.accuracy - b.confidence)) for b in bins if b.count]
    ece = math.fsum(n / total * g for n, g in gaps)
    mce = max(g for _, g in gaps)
    return CalibrationResult(table.k_bins, total, bins, ece, mce)


def compute_calibration(
    pairs: Iterable[tuple[float, bool]], k_bins: int = DEFAULT_BINS
) -> CalibrationResult:
    """Bin a (confidence, correct) stream and report ece, mce, and bin stats."""
    conf: list[float] = []
    corr: list[bool] = []
    for c, ok in pairs:
        conf.append(float(c))
        corr.append(bool(ok))
    if not conf:
        raise ValidationError("empty (confidence, correct) stream")
    table = BinTable.empty(k_bins)
    table.add_float64(np.array(conf, dtype=np.float64), np.array(corr, dtype=bool))
    return result_from_table(table)


def confidence_arrays(probmap: ProbMap, mask: LabelMask) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel max probability (float32) and argmax correctness (bool).

    The predicted class is the argmax over classes; on ties the lowest class
    index wins.
    """
    if (probmap.height, probmap.width) != (mask.height, mask.width):
        raise ValidationError(
            f"dimension mismatch: probability map {probmap.height}x{probmap.width} "
            f"vs mask {mask.height}x{mask.width}"
        )
    pred = np.argmax(probmap.data, axis=2)
    conf = np.max(probmap.data, axis=2)
    correct = pred == mask.data
    return conf, correct


def pixel_confidence(probmap: ProbMap, mask: LabelMask) -> Iterator[tuple[float, bool]]:
    """Yield (confidence, correct) per pixel in row-major order."""
    conf, correct = confidence_arrays(probmap, mask)
    for c, ok in zip(conf.ravel().tolist(), correct.ravel().tolist()):
        yield float(c), bool(ok)


@dataclass
class CalibrationReport:
    """Corpus-level calibration of one model on one split."""

    model_id: str
    k_bins: int
    total: int
    bins: tuple[BinStat, ...]
    ece: float
    mce: float
    per_image: list[tuple[str, float]]


def image_bin_table(
    manifest: Manifest, model_id: str, split: str, image_id: str, k_bins: int
) -> BinTable:
    """Bin table of a single image, with model/image context on any failure."""
    entry = next(e for e in manifest.split(split) if e.image_id == image_id)
    try:
        probmap = read_probmap(manifest.prediction_path(model_id, split, image_id))
        mask = read_mask(entry.mask_path)
        check_mask_classes(mask, manifest.classes)
        conf, correct = confidence_arrays(probmap, mask)
    except (ValidationError,) as exc:
        raise type(exc)(f"model {model_id!r} image {image_id!r}: {exc}") from exc
    table = BinTable.empty(k_bins)
    table.add_float32(conf, correct)
    return table


def calibrate_model(
    model_id: str,
    split: str,
    manifest: Manifest,
    k_bins: int = DEFAULT_BINS,
    mapper: Callable = map,
) -> CalibrationReport:
    """Pool every pixel of every image in ``split`` into one corpus report.

    ``mapper`` may be a thread pool's map; per-image tables come back in
    manifest order and merge exactly, so the corpus result does not depend
    on scheduling.
    """
    manifest.model(model_id)
    entries = manifest.split(split)
    if not entries:
        raise ValidationError(f"split {split!r} has no images")
    tables = list(
        mapper(lambda e: image_bin_table(manifest, model_id, split, e.image_id, k_bins), entries)
    )
    per_image = [
        (entry.image_id, result_from_table(table).ece)
        for entry, table in zip(entries, tables)
    ]
    pooled = BinTable.empty(k_bins)
    for table in tables:
        pooled.merge(table)
    res = result_from_table(pooled)
    return CalibrationReport(model_id, k_bins, res.total, res.bins, res.ece, res.mce, per_image)


def report_from_table(
    model_id: str, table: BinTable, per_image: Sequence[tuple[str, float]]
) -> CalibrationReport:
    res = result_from_table(table)
    return CalibrationReport(
        model_id, res.k_bins, res.total, res.bins, res.ece, res.mce, list(per_image)
    )


def report_to_dict(report: CalibrationReport) -> dict:
    """JSON-ready form of a report (schema version 1)."""
    return {
        "format_version": 1,
        "model_id": report.model_id,
        "K": report.k_bins,
        "N": report.total,
        "ece": report.ece,
        "mce": report.mce,
        "bins": [
            {
                "k": b.index,
                "lower": b.lower,
                "upper": b.upper,
                "count": b.count,
                "acc": b.accuracy,
                "conf": b.confidence,
            }
            for b in report.bins
        ],
        "per_image": [{"image_id": i, "ece": e} for i, e in report.per_image],
    }


def report_from_dict(doc: dict) -> CalibrationReport:
    if doc.get("format_version") != 1:
        raise ValidationError(
            f"calibration report format_version must be 1, got {doc.get('format_version')!r}"
        )
    try:
        bins = tuple(
            BinStat(b["k"], b["lower"], b["upper"], b["count"], b["acc"], b["conf"])
            for b in doc["bins"]
        )
        per_image = [(p["image_id"], p["ece"]) for p in doc["per_image"]]
        return CalibrationReport(
            doc["model_id"], doc["K"], doc["N"], bins, doc["ece"], doc["mce"], per_image
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"calibration report missing field: {exc}") from exc


def reliability_csv(report: CalibrationReport) -> str:
    """Reliability-diagram table; empty bins leave acc/conf/gap blank."""
    lines = ["bin_index,lower,upper,count,accuracy,confidence,gap"]
    for b in report.bins:
        if b.count:
            gap = abs(b.accuracy - b.confidence)
            tail = f"{b.accuracy!r},{b.confidence!r},{gap!r}"
        else:
            tail = ",,"
        lines.append(f"{b.index},{b.lower!r},{b.upper!r},{b.count},{tail}")
    return "\n".join(lines) + "\n"
