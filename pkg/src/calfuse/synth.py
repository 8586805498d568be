"""Synthetic lung-style segmentation corpora with dial-a-model behavior.

Ground truth per image is two filled axis-aligned ellipses (class 1) on
background (class 0), jittered per image. Each synthetic model perturbs the
true logit with independent noise and squashes through a temperature-scaled
logistic, so argmax skill and confidence calibration move on separate knobs:

    z = skill * (2 * [truth == 1] - 1) + noise * eta,   eta ~ N(0, 1)-ish
    P(class 1) = 1 / (1 + exp(-z / temperature))

Every draw comes from the keyed counter generator in :mod:`calfuse.rng`
(truth keyed by (seed, image), noise keyed by (seed, image, model, pixel)),
so a spec regenerates the same dataset bytes anywhere. The ellipse membership
test and the Irwin-Hall noise use only exactly-rounded arithmetic; the
logistic's exp is the lone transcendental in the pipeline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .rng import fold, normal_stream, unit_stream
from .tensor_store import (
    SPLIT_NAMES,
    LabelMask,
    ProbMap,
    ValidationError,
    load_manifest,
    write_mask,
    write_probmap,
)

CLASS_NAMES = ("NonLung", "Lung")
MIN_SIDE = 16  # ellipse geometry below this cannot guarantee both classes

_TRUTH_TAG = 1
_NOISE_TAG = 2


@dataclass(frozen=True)
class SynthModel:
    model_id: str
    skill: float
    temperature: float
    noise: float

    def validate(self) -> None:
        if not self.model_id:
            raise ValidationError("synthetic model needs a non-empty model_id")
        if not self.skill > 0.0:
            raise ValidationError(f"model {self.model_id!r}: skill must be > 0, got {self.skill}")
        if not self.temperature > 0.0:
            raise ValidationError(
                f"model {self.model_id!r}: temperature must be > 0, got {self.temperature}"
            )
        if self.noise < 0.0:
            raise ValidationError(f"model {self.model_id!r}: noise must be >= 0, got {self.noise}")


@dataclass
class SynthSpec:
    height: int
    width: int
    seed: int
    images: dict[str, int]  # split -> image count
    models: list[SynthModel]

    def validate(self) -> None:
        if self.height < MIN_SIDE or self.width < MIN_SIDE:
            raise ValidationError(
                f"synthetic images must be at least {MIN_SIDE}x{MIN_SIDE}, "
                f"got {self.height}x{self.width}"
            )
        for split in self.images:
            if split not in SPLIT_NAMES:
                raise ValidationError(f"unknown split {split!r}, expected one of {SPLIT_NAMES}")
            if self.images[split] < 0:
                raise ValidationError(f"split {split!r} image count must be >= 0")
        if sum(self.images.get(s, 0) for s in SPLIT_NAMES) < 1:
            raise ValidationError("spec generates no images")
        if not self.models:
            raise ValidationError("spec lists no models")
        ids = [m.model_id for m in self.models]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate model_id in spec")
        for m in self.models:
            m.validate()

    def to_dict(self) -> dict:
        return {
            "format_version": 1,
            "height": self.height,
            "width": self.width,
            "seed": self.seed,
            "images": {s: self.images.get(s, 0) for s in SPLIT_NAMES},
            "models": [
                {
                    "model_id": m.model_id,
                    "skill": m.skill,
                    "temperature": m.temperature,
                    "noise": m.noise,
                }
                for m in self.models
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthSpec":
        if doc.get("format_version") != 1:
            raise ValidationError(
                f"spec format_version must be 1, got {doc.get('format_version')!r}"
            )
        try:
            models = [
                SynthModel(m["model_id"], float(m["skill"]), float(m["temperature"]), float(m["noise"]))
                for m in doc["models"]
            ]
            spec = cls(
                int(doc["height"]),
                int(doc["width"]),
                int(doc["seed"]),
                {s: int(n) for s, n in doc["images"].items()},
                models,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed spec: {exc}") from exc
        spec.validate()
        return spec


def _ellipse(inside: np.ndarray, xs, ys, cx, cy, rx, ry) -> None:
    dx = (xs - cx) / rx
    dy = (ys - cy) / ry
    inside |= dx[None, :] ** 2 + dy[:, None] ** 2 <= 1.0


def gen_truth(spec: SynthSpec, image_index: int) -> LabelMask:
    """Ground truth for the image with the given corpus-wide index."""
    h, w = spec.height, spec.width
    u = unit_stream(fold(spec.seed, _TRUTH_TAG, image_index), 0, 8)
    xs = np.arange(w, dtype=np.float64) + 0.5
    ys = np.arange(h, dtype=np.float64) + 0.5
    inside = np.zeros((h, w), dtype=bool)
    # left and right lobes; ranges keep both ellipses inside the frame and
    # leave background at the borders for any height, width >= MIN_SIDE
    _ellipse(
        inside, xs, ys,
        (0.22 + 0.10 * u[0]) * w, (0.40 + 0.20 * u[1]) * h,
        (0.10 + 0.06 * u[2]) * w, (0.18 + 0.12 * u[3]) * h,
    )
    _ellipse(
        inside, xs, ys,
        (0.68 + 0.10 * u[4]) * w, (0.40 + 0.20 * u[5]) * h,
        (0.10 + 0.06 * u[6]) * w, (0.18 + 0.12 * u[7]) * h,
    )
    mask = inside.astype(np.uint8)
    present = int(mask.min()) == 0 and int(mask.max()) == 1
    if not present:
        raise ValidationError(f"image {image_index}: generated truth lost a class")
    return LabelMask(h, w, mask, classes=2)


def gen_prediction(
    spec: SynthSpec, model: SynthModel, truth: LabelMask, image_index: int
) -> ProbMap:
    """One model's probability map for one image."""
    h, w = truth.height, truth.width
    sign = 2.0 * truth.data.astype(np.float64) - 1.0
    z = model.skill * sign
    if model.noise > 0.0:
        key = fold(spec.seed, _NOISE_TAG, image_index, model.model_id)
        eta = normal_stream(key, 0, h * w).reshape(h, w)
        z = z + model.noise * eta
    with np.errstate(over="ignore"):
        p1 = (1.0 / (1.0 + np.exp(-z / model.temperature))).astype(np.float32)
    p0 = np.float32(1.0) - p1  # float32 pair sums to one after rounding
    data = np.ascontiguousarray(np.stack([p0, p1], axis=2))
    return ProbMap(h, w, 2, data)


def iter_images(spec: SynthSpec):
    """Yield (split, image_id, corpus-wide index) in generation order."""
    index = 0
    for split in SPLIT_NAMES:
        for i in range(spec.images.get(split, 0)):
            yield split, f"{split}_{i:04d}", index
            index += 1


def gen_dataset(spec: SynthSpec, out_dir: str | Path) -> Path:
    """Write masks, predictions, and a manifest; returns the manifest path.

    Regenerating with the same spec reproduces every byte.
    """
    spec.validate()
    out = Path(out_dir)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    for model in spec.models:
        for split in SPLIT_NAMES:
            if spec.images.get(split, 0):
                (out / "predictions" / model.model_id / split).mkdir(parents=True, exist_ok=True)

    split_entries: dict[str, list[dict]] = {s: [] for s in SPLIT_NAMES}
    for split, image_id, index in iter_images(spec):
        truth = gen_truth(spec, index)
        write_mask(truth, out / "masks" / f"{image_id}.png")
        split_entries[split].append({"image_id": image_id, "mask": f"masks/{image_id}.png"})
        for model in spec.models:
            probmap = gen_prediction(spec, model, truth, index)
            write_probmap(
                probmap, out / "predictions" / model.model_id / split / f"{image_id}.cbpm"
            )

    manifest = {
        "format_version": 1,
        "class_names": list(CLASS_NAMES),
        "models": [
            {
                "model_id": m.model_id,
                "predictions": {
                    s: f"predictions/{m.model_id}/{s}"
                    for s in SPLIT_NAMES
                    if spec.images.get(s, 0)
                },
            }
            for m in spec.models
        ],
        "splits": split_entries,
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", "utf-8")
    load_manifest(manifest_path)  # a fresh dataset must validate cleanly
    return manifest_path
