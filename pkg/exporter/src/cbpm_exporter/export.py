"""Convert framework-style prediction trees into calfuse dataset trees.

Expected source layout::

    source/
      masks/           one 8-bit grayscale PNG per image
      <model_id>/      one ``<image_id>.npy`` per image, holding either an
                       H x W x C probability array or an H x W array of
                       positive-class probabilities (two-class jobs only)

Every subdirectory except ``masks`` is a model; image ids are the mask file
stems, and every model must provide an array for every mask (and nothing
else). The export writes ``masks/``, ``predictions/<model_id>/`` and
``manifest.json`` under the destination root, in the exact formats the fusion
tool reads, and finishes by loading the emitted manifest through the fusion
tool's own validator.

Per-pixel probability sums may drift from 1 by up to 1e-3 (framework float
slop); they are renormalized at export so the stored files meet the reader's
stricter 1e-4 bound. Values outside [0, 1] are never repaired.

Split assignment hashes each image id (with the job seed), ranks images by
the digest, and hands out split sizes computed by largest remainder, so the
requested ratios are met as exactly as the image count allows and the same
inputs always produce the same split.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from calfuse import LabelMask, ProbMap, load_manifest, write_mask, write_probmap

SPLIT_NAMES = ("training", "validation", "testing")
DEFAULT_RATIOS = (70, 10, 20)
SUM_DRIFT = 1e-3
MANIFEST_VERSION = 1


class ExportError(ValueError):
    """Source data or job parameters violate the export contract."""


@dataclass(frozen=True)
class ExportJob:
    source: Path
    dest: Path
    class_names: tuple[str, ...]
    ratios: tuple[int, int, int] = DEFAULT_RATIOS
    seed: int = 0

    @property
    def classes(self) -> int:
        return len(self.class_names)

    def class_map(self) -> dict[int, int]:
        """Mask pixel value -> class index, a bijection onto [0, classes).

        Two-class jobs use the 0/255 convention (255 is the positive class);
        with more classes the masks must already hold class indices.
        """
        if self.classes == 2:
            return {0: 0, 255: 1}
        return {v: v for v in range(self.classes)}

    def validate(self) -> None:
        if self.classes < 2:
            raise ExportError(f"need at least 2 class names, got {list(self.class_names)}")
        if len(set(self.class_names)) != self.classes:
            raise ExportError(f"duplicate class names in {list(self.class_names)}")
        if len(self.ratios) != len(SPLIT_NAMES):
            raise ExportError(
                f"split ratios must give {len(SPLIT_NAMES)} numbers "
                f"(training,validation,testing), got {list(self.ratios)}"
            )
        if any(r < 0 for r in self.ratios) or sum(self.ratios) <= 0:
            raise ExportError(f"split ratios must be >= 0 and sum > 0, got {list(self.ratios)}")


def scan_source(job: ExportJob) -> tuple[list[str], list[str]]:
    """Return (model_ids, image_ids), rejecting incomplete trees."""
    masks = job.source / "masks"
    if not masks.is_dir():
        raise ExportError(f"{masks} is not a directory")
    image_ids = sorted(p.stem for p in masks.glob("*.png"))
    if not image_ids:
        raise ExportError(f"no *.png masks under {masks}")
    model_ids = sorted(
        d.name for d in job.source.iterdir() if d.is_dir() and d.name != "masks"
    )
    if not model_ids:
        raise ExportError(f"no model directories under {job.source}")
    wanted = set(image_ids)
    for model_id in model_ids:
        stems = {p.stem for p in (job.source / model_id).glob("*.npy")}
        orphans = sorted(stems - wanted)
        if orphans:
            raise ExportError(
                f"model {model_id!r}: missing mask for {orphans[0]!r} "
                f"(no {orphans[0]}.png under {masks})"
            )
        absent = sorted(wanted - stems)
        if absent:
            raise ExportError(f"model {model_id!r}: no array for image {absent[0]!r}")
    return model_ids, image_ids


def split_counts(n: int, ratios: tuple[int, int, int]) -> tuple[int, ...]:
    """Largest-remainder apportionment of ``n`` images across the splits."""
    total = sum(ratios)
    shares = [n * r // total for r in ratios]
    leftover = n - sum(shares)
    # biggest fractional remainder first; earlier split wins ties
    order = sorted(range(len(ratios)), key=lambda i: (-(n * ratios[i] % total), i))
    for i in order[:leftover]:
        shares[i] += 1
    return tuple(shares)


def _rank(seed: int, image_id: str) -> tuple[str, str]:
    digest = hashlib.sha256(f"{seed}:{image_id}".encode("utf-8")).hexdigest()
    return digest, image_id


def assign_splits(
    image_ids, ratios: tuple[int, int, int] = DEFAULT_RATIOS, seed: int = 0
) -> dict[str, str]:
    """Deterministic image_id -> split name assignment.

    Depends only on (seed, image id set, ratios): insertion order, file
    timestamps, and everything else are irrelevant.
    """
    ids = sorted(image_ids)
    if len(set(ids)) != len(ids):
        raise ExportError("duplicate image ids in split assignment")
    ranked = sorted(ids, key=lambda image_id: _rank(seed, image_id))
    counts = split_counts(len(ranked), ratios)
    assignment: dict[str, str] = {}
    start = 0
    for split, count in zip(SPLIT_NAMES, counts):
        for image_id in ranked[start:start + count]:
            assignment[image_id] = split
        start += count
    return assignment


def _load_array(path: Path) -> np.ndarray:
    try:
        return np.load(path, allow_pickle=False)
    except (ValueError, OSError, EOFError) as exc:
        raise ExportError(f"{path}: not a readable .npy array ({exc})") from exc


def array_to_probmap(arr: np.ndarray, classes: int, name: str) -> ProbMap:
    """Validate, expand binary arrays, renormalize, and narrow to float32."""
    arr = np.asarray(arr)
    if arr.dtype.kind not in "fiu":
        raise ExportError(f"{name}: array dtype {arr.dtype} is not numeric")
    if arr.ndim == 2:
        if classes != 2:
            raise ExportError(
                f"{name}: single-channel array implies 2 classes, job declares {classes}"
            )
        p = arr.astype(np.float64)
        _reject_out_of_range(p[:, :, None], name)
        arr = np.stack([1.0 - p, p], axis=2)
    elif arr.ndim == 3:
        if arr.shape[2] != classes:
            raise ExportError(
                f"{name}: array has {arr.shape[2]} channels, job declares {classes} classes"
            )
        arr = arr.astype(np.float64)
        _reject_out_of_range(arr, name)
    else:
        raise ExportError(f"{name}: expected an H x W x C or H x W array, got shape {arr.shape}")
    sums = arr.sum(axis=2)
    off = np.abs(sums - 1.0) > SUM_DRIFT
    if off.any():
        r, c = (int(i) for i in np.argwhere(off)[0])
        raise ExportError(
            f"{name}: probabilities at pixel ({r}, {c}) sum to {float(sums[r, c]):.6g}, "
            f"more than {SUM_DRIFT:g} from 1"
        )
    return ProbMap.from_array((arr / sums[:, :, None]).astype(np.float32))


def _reject_out_of_range(arr: np.ndarray, name: str) -> None:
    # the comparison is False for NaN, so this also rejects non-finite values
    bad = ~((arr >= 0.0) & (arr <= 1.0))
    if bad.any():
        r, c, k = (int(i) for i in np.argwhere(bad)[0])
        what = float(arr[r, c, k])
        if arr.shape[2] == 1:
            raise ExportError(f"{name}: value {what!r} at pixel ({r}, {c}) outside [0, 1]")
        raise ExportError(
            f"{name}: value {what!r} at pixel ({r}, {c}) class {k} outside [0, 1]"
        )


def _read_source_mask(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode == "1":
            img = img.convert("L")
        if img.mode != "L":
            raise ExportError(
                f"{path}: mask must be an 8-bit single-channel grayscale PNG, "
                f"got mode {img.mode!r}"
            )
        return np.asarray(img, dtype=np.uint8)


def _mask_sizes(job: ExportJob, image_ids) -> dict[str, tuple[int, int]]:
    sizes = {}
    for image_id in image_ids:
        with Image.open(job.source / "masks" / f"{image_id}.png") as img:
            w, h = img.size
        sizes[image_id] = (h, w)
    return sizes


def export_masks(job: ExportJob) -> list[Path]:
    """Remap every source mask through the class map and write it under dest."""
    job.validate()
    _, image_ids = scan_source(job)
    lut = np.full(256, -1, dtype=np.int16)
    for value, index in job.class_map().items():
        lut[value] = index
    out_dir = job.dest / "masks"
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for image_id in image_ids:
        src = job.source / "masks" / f"{image_id}.png"
        raw = _read_source_mask(src)
        mapped = lut[raw]
        if (mapped < 0).any():
            value = int(raw[mapped < 0][0])
            raise ExportError(
                f"{src}: pixel value {value} has no class mapping "
                f"(expected one of {sorted(job.class_map())})"
            )
        out = out_dir / f"{image_id}.png"
        write_mask(
            LabelMask(raw.shape[0], raw.shape[1], mapped.astype(np.uint8), job.classes), out
        )
        written.append(out)
    return written


def export_probmaps(job: ExportJob) -> list[Path]:
    """Convert every model's arrays to ``.cbpm`` files under dest."""
    job.validate()
    model_ids, image_ids = scan_source(job)
    sizes = _mask_sizes(job, image_ids)
    written = []
    for model_id in model_ids:
        out_dir = job.dest / "predictions" / model_id
        out_dir.mkdir(parents=True, exist_ok=True)
        for image_id in image_ids:
            src = job.source / model_id / f"{image_id}.npy"
            probmap = array_to_probmap(_load_array(src), job.classes, str(src))
            if (probmap.height, probmap.width) != sizes[image_id]:
                h, w = sizes[image_id]
                raise ExportError(
                    f"{src}: array is {probmap.height}x{probmap.width} "
                    f"but the mask for {image_id!r} is {h}x{w}"
                )
            out = out_dir / f"{image_id}.cbpm"
            write_probmap(probmap, out)
            written.append(out)
    return written


def emit_manifest(job: ExportJob) -> Path:
    """Write dest/manifest.json binding the exported files and splits."""
    job.validate()
    model_ids, image_ids = scan_source(job)
    assignment = assign_splits(image_ids, job.ratios, job.seed)
    doc = {
        "format_version": MANIFEST_VERSION,
        "class_names": list(job.class_names),
        "models": [
            {
                "model_id": model_id,
                "predictions": {split: f"predictions/{model_id}" for split in SPLIT_NAMES},
            }
            for model_id in model_ids
        ],
        "splits": {
            split: [
                {"image_id": image_id, "mask": f"masks/{image_id}.png"}
                for image_id in image_ids
                if assignment[image_id] == split
            ]
            for split in SPLIT_NAMES
        },
    }
    job.dest.mkdir(parents=True, exist_ok=True)
    path = job.dest / "manifest.json"
    path.write_text(json.dumps(doc, indent=2) + "\n", "utf-8")
    return path


def run_export(job: ExportJob) -> Path:
    """Full export; the emitted manifest is re-validated by the fusion tool."""
    job.validate()
    export_masks(job)
    export_probmaps(job)
    path = emit_manifest(job)
    load_manifest(path)  # guarantee: emitted trees always pass downstream validation
    return path
