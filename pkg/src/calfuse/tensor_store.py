"""Bit-exact storage for probability maps, label masks, and dataset manifests.

Probability maps use a minimal container (``.cbpm``): two ASCII header lines
followed by raw little-endian IEEE-754 float32 samples, row-major with the
class index fastest-varying::

    CBPM 1\\n
    height=<H> width=<W> classes=<C>\\n
    <H*W*C little-endian float32>

The format is fully pinned down to the byte, so any language can produce or
consume it exactly. Label masks are 8-bit single-channel grayscale PNGs whose
pixel values are class indices. A JSON manifest binds class names, models,
splits, and files together; every path in it is resolved relative to the
manifest's own directory.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

MAGIC = b"CBPM 1\n"
PROB_SUM_TOL = 1e-4
SPLIT_NAMES = ("training", "validation", "testing")
MANIFEST_VERSION = 1

_HEADER_RE = re.compile(rb"height=(\d+) width=(\d+) classes=(\d+)")


class ValidationError(ValueError):
    """Inputs violate a documented invariant; maps to CLI exit code 1."""


class DataError(RuntimeError):
    """File bytes are corrupt, truncated, or inconsistent; CLI exit code 2."""


@dataclass
class ProbMap:
    """Per-pixel class probabilities, shape (height, width, classes) float32."""

    height: int
    width: int
    classes: int
    data: np.ndarray

    @classmethod
    def from_array(cls, data: np.ndarray) -> "ProbMap":
        arr = np.ascontiguousarray(data, dtype=np.float32)
        _check_prob_array(arr, ValidationError)
        h, w, c = arr.shape
        return cls(h, w, c, arr)

    def validate(self) -> None:
        if self.data.shape != (self.height, self.width, self.classes):
            raise ValidationError(
                f"probability map fields say {self.height}x{self.width}x{self.classes} "
                f"but data has shape {self.data.shape}"
            )
        _check_prob_array(self.data, ValidationError)


@dataclass
class LabelMask:
    """Per-pixel class indices, shape (height, width) uint8.

    ``classes`` is the class count when known (masks produced by fusion or
    synthesis carry it; masks read from disk do not until checked against a
    manifest).
    """

    height: int
    width: int
    data: np.ndarray
    classes: int | None = None


def _check_prob_array(data: np.ndarray, err: type[Exception]) -> None:
    if data.ndim != 3:
        raise err(f"probability map must be height x width x classes, got shape {data.shape}")
    h, w, c = data.shape
    if h < 1 or w < 1:
        raise err(f"probability map needs height, width >= 1, got {h}x{w}")
    if c < 2:
        raise err(f"probability map needs at least 2 classes, got {c}")
    if data.dtype != np.float32:
        raise err(f"probability map samples must be float32, got {data.dtype}")
    finite = np.isfinite(data)
    if not finite.all():
        r, col, k = (int(i) for i in np.argwhere(~finite)[0])
        raise err(f"non-finite value {data[r, col, k]!r} at pixel ({r}, {col}) class {k}")
    out = (data < 0.0) | (data > 1.0)
    if out.any():
        r, col, k = (int(i) for i in np.argwhere(out)[0])
        raise err(f"value {float(data[r, col, k])!r} at pixel ({r}, {col}) class {k} outside [0, 1]")
    sums = data.astype(np.float64).sum(axis=2)
    off = np.abs(sums - 1.0) > PROB_SUM_TOL
    if off.any():
        r, col = (int(i) for i in np.argwhere(off)[0])
        raise err(
            f"class probabilities at pixel ({r}, {col}) sum to {float(sums[r, col]):.6g}, "
            f"expected 1 within {PROB_SUM_TOL:g}"
        )


def write_probmap(probmap: ProbMap, destination: str | Path) -> None:
    """Serialize a ProbMap; invalid maps are rejected before any bytes hit disk."""
    probmap.validate()
    header = MAGIC + (
        f"height={probmap.height} width={probmap.width} classes={probmap.classes}\n".encode("ascii")
    )
    payload = np.ascontiguousarray(probmap.data).astype("<f4", copy=False).tobytes()
    with open(destination, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def _parse_header(blob: bytes, path: Path) -> tuple[int, int, int, int]:
    """Return (height, width, classes, payload offset) or raise DataError."""
    if not blob.startswith(MAGIC):
        raise DataError(f"{path}: bad magic, not a CBPM version 1 file")
    nl = blob.find(b"\n", len(MAGIC))
    if nl < 0:
        raise DataError(f"{path}: missing dimension header line")
    m = _HEADER_RE.fullmatch(blob[len(MAGIC):nl])
    if m is None:
        raise DataError(f"{path}: malformed dimension header {blob[len(MAGIC):nl]!r}")
    h, w, c = (int(g) for g in m.groups())
    if h < 1 or w < 1:
        raise DataError(f"{path}: header dimensions {h}x{w} out of range")
    if c < 2:
        raise DataError(f"{path}: header declares {c} classes, need at least 2")
    return h, w, c, nl + 1


def read_probmap(source: str | Path) -> ProbMap:
    """Load and validate a ``.cbpm`` file; never returns a partial map."""
    path = Path(source)
    with open(path, "rb") as fh:
        blob = fh.read()
    h, w, c, offset = _parse_header(blob, path)
    expected = h * w * c * 4
    if len(blob) - offset != expected:
        raise DataError(
            f"{path}: payload holds {len(blob) - offset} bytes, header implies {expected}"
        )
    data = np.frombuffer(blob, dtype="<f4", offset=offset).reshape(h, w, c)
    data = np.ascontiguousarray(data).astype(np.float32, copy=False)
    _check_prob_array(data, DataError)
    return ProbMap(h, w, c, data)


def probmap_header(source: str | Path) -> tuple[int, int, int]:
    """Read only the header (plus a size check) of a ``.cbpm`` file."""
    path = Path(source)
    with open(path, "rb") as fh:
        head = fh.read(128)
    h, w, c, offset = _parse_header(head, path)
    size = path.stat().st_size
    if size != offset + h * w * c * 4:
        raise DataError(
            f"{path}: file is {size} bytes, header implies {offset + h * w * c * 4}"
        )
    return h, w, c


def write_mask(mask: LabelMask, destination: str | Path) -> None:
    data = np.ascontiguousarray(mask.data, dtype=np.uint8)
    if data.shape != (mask.height, mask.width):
        raise ValidationError(
            f"mask fields say {mask.height}x{mask.width} but data has shape {data.shape}"
        )
    if mask.classes is not None:
        check_mask_classes(mask, mask.classes)
    Image.fromarray(data, mode="L").save(destination, format="PNG")


def read_mask(source: str | Path) -> LabelMask:
    """Load an 8-bit single-channel PNG mask; anything else is rejected."""
    path = Path(source)
    with Image.open(path) as img:
        if img.mode != "L":
            raise DataError(
                f"{path}: mask must be an 8-bit single-channel grayscale PNG, got mode {img.mode!r}"
            )
        data = np.asarray(img, dtype=np.uint8)
    return LabelMask(int(data.shape[0]), int(data.shape[1]), data)


def check_mask_classes(mask: LabelMask, classes: int, context: str = "") -> None:
    """Reject masks holding a class index outside [0, classes)."""
    top = int(mask.data.max(initial=0))
    if top >= classes:
        where = context + ": " if context else ""
        raise ValidationError(
            f"{where}mask contains class index {top}, expected indices below {classes}"
        )


@dataclass(frozen=True)
class ImageEntry:
    image_id: str
    mask_path: Path


@dataclass(frozen=True)
class ModelEntry:
    model_id: str
    predictions: dict[str, Path]  # split name -> directory of <image_id>.cbpm


@dataclass
class Manifest:
    root: Path
    class_names: list[str]
    models: list[ModelEntry]
    splits: dict[str, list[ImageEntry]]
    format_version: int = MANIFEST_VERSION

    @property
    def classes(self) -> int:
        return len(self.class_names)

    def model_ids(self) -> list[str]:
        return [m.model_id for m in self.models]

    def model(self, model_id: str) -> ModelEntry:
        for m in self.models:
            if m.model_id == model_id:
                return m
        raise ValidationError(f"manifest has no model {model_id!r}")

    def split(self, name: str) -> list[ImageEntry]:
        if name not in SPLIT_NAMES:
            raise ValidationError(f"unknown split {name!r}, expected one of {SPLIT_NAMES}")
        return self.splits.get(name, [])

    def prediction_path(self, model_id: str, split: str, image_id: str) -> Path:
        entry = self.model(model_id)
        if split not in entry.predictions:
            raise ValidationError(
                f"model {model_id!r} declares no prediction directory for split {split!r}"
            )
        return entry.predictions[split] / f"{image_id}.cbpm"

    def class_index(self, name_or_index: str) -> int:
        """Resolve a class given either its name or a decimal index."""
        if name_or_index in self.class_names:
            return self.class_names.index(name_or_index)
        try:
            idx = int(name_or_index)
        except ValueError:
            raise ValidationError(
                f"unknown class {name_or_index!r}, expected one of {self.class_names} or an index"
            ) from None
        if not 0 <= idx < self.classes:
            raise ValidationError(f"class index {idx} outside [0, {self.classes})")
        return idx


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ValidationError(message)


def load_manifest(source: str | Path) -> Manifest:
    """Parse and fully validate a manifest.

    Validation covers schema shape, unique ids, file existence, class counts,
    and per-image dimension consistency between masks and every model's
    probability maps. Mask pixel values are checked against the class count
    where the masks are consumed, not here, since that requires decoding.
    """
    path = Path(source)
    try:
        doc = json.loads(path.read_text("utf-8"))
    except OSError:
        raise
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid JSON ({exc})") from exc

    root = path.parent
    _require(isinstance(doc, dict), f"{path}: manifest must be a JSON object")
    _require(
        doc.get("format_version") == MANIFEST_VERSION,
        f"{path}: format_version must be {MANIFEST_VERSION}, got {doc.get('format_version')!r}",
    )
    names = doc.get("class_names")
    _require(
        isinstance(names, list) and len(names) >= 2 and all(isinstance(n, str) for n in names),
        f"{path}: class_names must list at least 2 class name strings",
    )
    _require(len(set(names)) == len(names), f"{path}: class_names contains duplicates")

    raw_models = doc.get("models")
    _require(isinstance(raw_models, list) and raw_models, f"{path}: models must be a non-empty list")
    models: list[ModelEntry] = []
    for entry in raw_models:
        _require(isinstance(entry, dict), f"{path}: each model entry must be an object")
        model_id = entry.get("model_id")
        _require(isinstance(model_id, str) and model_id != "", f"{path}: model_id must be a string")
        preds = entry.get("predictions")
        _require(isinstance(preds, dict), f"{path}: model {model_id!r} needs a predictions object")
        dirs: dict[str, Path] = {}
        for split, rel in preds.items():
            _require(
                split in SPLIT_NAMES,
                f"{path}: model {model_id!r} references unknown split {split!r}",
            )
            _require(
                isinstance(rel, str),
                f"{path}: model {model_id!r} split {split!r} directory must be a string",
            )
            dirs[split] = root / rel
        models.append(ModelEntry(model_id, dirs))
    ids = [m.model_id for m in models]
    _require(len(set(ids)) == len(ids), f"{path}: duplicate model_id in models")

    raw_splits = doc.get("splits")
    _require(isinstance(raw_splits, dict), f"{path}: splits must be an object")
    for split in raw_splits:
        _require(split in SPLIT_NAMES, f"{path}: unknown split name {split!r}")
    splits: dict[str, list[ImageEntry]] = {}
    for split in SPLIT_NAMES:
        entries: list[ImageEntry] = []
        seen: set[str] = set()
        for item in raw_splits.get(split, []):
            _require(isinstance(item, dict), f"{path}: split {split!r} entries must be objects")
            image_id = item.get("image_id")
            mask_rel = item.get("mask")
            _require(
                isinstance(image_id, str) and image_id != "",
                f"{path}: split {split!r} entry needs an image_id string",
            )
            _require(
                isinstance(mask_rel, str),
                f"{path}: split {split!r} image {image_id!r} needs a mask path",
            )
            _require(
                image_id not in seen,
                f"{path}: duplicate image_id {image_id!r} in split {split!r}",
            )
            seen.add(image_id)
            entries.append(ImageEntry(image_id, root / mask_rel))
        splits[split] = entries

    manifest = Manifest(root, list(names), models, splits)
    _validate_manifest_files(manifest, path)
    return manifest


def _validate_manifest_files(manifest: Manifest, path: Path) -> None:
    for split, entries in manifest.splits.items():
        for entry in entries:
            if not entry.mask_path.is_file():
                raise ValidationError(
                    f"{path}: split {split!r} image {entry.image_id!r}: "
                    f"missing mask {entry.mask_path}"
                )
            with Image.open(entry.mask_path) as img:
                mask_w, mask_h = img.size
            for model in manifest.models:
                if split not in model.predictions:
                    raise ValidationError(
                        f"{path}: model {model.model_id!r} has no prediction directory "
                        f"for split {split!r} but the split is non-empty"
                    )
                pred = model.predictions[split] / f"{entry.image_id}.cbpm"
                if not pred.is_file():
                    raise ValidationError(
                        f"{path}: model {model.model_id!r} image {entry.image_id!r}: "
                        f"missing prediction {pred}"
                    )
                h, w, c = probmap_header(pred)
                if c != manifest.classes:
                    raise ValidationError(
                        f"{path}: model {model.model_id!r} image {entry.image_id!r}: "
                        f"prediction has {c} classes, manifest declares {manifest.classes}"
                    )
                if (h, w) != (mask_h, mask_w):
                    raise ValidationError(
                        f"{path}: model {model.model_id!r} image {entry.image_id!r}: "
                        f"prediction is {h}x{w} but mask is {mask_h}x{mask_w}"
                    )
