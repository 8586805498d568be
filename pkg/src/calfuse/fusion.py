"""Pixelwise ensemble fusion: majority, calibration-weighted, and meta voting.

Members vote with their hard argmax labels. A weighted method scores class c
at a pixel as the sum of weights 1/max(ce, floor) over members voting c,
taking ce from each member's pooled validation calibration (ece or mce).
Score ties fall back to the summed probability mass of the tied classes
across members, then to the lowest class index, so class 0 (background) is
only ever picked from an exhausted cascade. "mvem" re-votes pixelwise over
the three constituent fused masks (majority, weighted_ece, weighted_mce)
with the same cascade.

Vectorized scoring accumulates member by member in roster order, which keeps
results bit-identical to a per-pixel reference loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .calibration import CalibrationReport
from .tensor_store import LabelMask, Manifest, ValidationError, read_probmap

CE_FLOOR = 1e-6
TIE_RULE = "weight-sum,prob-mass,lowest-index/1"
METHODS = ("majority", "weighted_ece", "weighted_mce", "mvem")
CONSTITUENTS = ("majority", "weighted_ece", "weighted_mce")


@dataclass(frozen=True)
class ModelWeight:
    model_id: str
    ce: float
    weight: float


@dataclass
class FusionConfig:
    method: str
    members: list[str]
    k_bins: int = 10
    ce_floor: float = CE_FLOOR
    tie_rule: str = TIE_RULE

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValidationError(f"unknown fusion method {self.method!r}, expected one of {METHODS}")
        if len(self.members) < 2:
            raise ValidationError(f"fusion needs at least 2 members, got {len(self.members)}")
        if len(set(self.members)) != len(self.members):
            raise ValidationError("fusion member list contains duplicates")
        if not self.ce_floor > 0.0:
            raise ValidationError(f"ce floor must be positive, got {self.ce_floor}")
        if self.tie_rule != TIE_RULE:
            raise ValidationError(f"unsupported tie rule {self.tie_rule!r}")


def derive_weights(
    reports: Sequence[CalibrationReport], method: str, ce_floor: float = CE_FLOOR
) -> list[ModelWeight]:
    """Weights 1/max(ce, floor) from pooled calibration errors, roster order."""
    if method not in ("weighted_ece", "weighted_mce"):
        raise ValidationError(f"no weights to derive for method {method!r}")
    if not ce_floor > 0.0:
        raise ValidationError(f"ce floor must be positive, got {ce_floor}")
    out = []
    for rep in reports:
        ce = rep.ece if method == "weighted_ece" else rep.mce
        if not 0.0 <= ce:
            raise ValidationError(f"model {rep.model_id!r} has invalid calibration error {ce!r}")
        out.append(ModelWeight(rep.model_id, ce, 1.0 / max(ce, ce_floor)))
    return out


@dataclass
class FusedImage:
    mask: LabelMask
    # winning share of the total vote weight, per pixel (float64); serves as
    # the ensemble's confidence when calibrating fused output
    confidence: np.ndarray


def _class_scores(votes: np.ndarray, weights: Sequence[float], classes: int) -> np.ndarray:
    scores = np.zeros((classes,) + votes.shape[1:], dtype=np.float64)
    cgrid = np.arange(classes).reshape((classes,) + (1,) * (votes.ndim - 1))
    for m in range(votes.shape[0]):  # member order fixes the addition order
        # zero-weight one-hot lanes add +0.0, which never changes a
        # nonnegative partial sum, so this matches per-pixel sequential adds
        scores += np.float64(weights[m]) * (votes[m] == cgrid)
    return scores


def _prob_mass(probs: Sequence[np.ndarray]) -> np.ndarray:
    classes = probs[0].shape[2]
    mass = np.zeros((classes,) + probs[0].shape[:2], dtype=np.float64)
    for p in probs:  # member order again
        mass += np.moveaxis(p.astype(np.float64), 2, 0)
    return mass


class _MemberArrays:
    """Member probability maps plus lazily shared derived arrays.

    Scoring only needs hard votes; the probability mass enters on score ties,
    which most pixels never hit, so it is computed on demand and shared by
    every constituent of an mvem call (the meta vote breaks its ties with the
    members' mass too, not with constituent masks).
    """

    def __init__(self, probs: Sequence[np.ndarray]):
        self.probs = probs
        self._votes: np.ndarray | None = None
        self._mass: np.ndarray | None = None

    def votes(self) -> np.ndarray:
        if self._votes is None:
            self._votes = np.stack([np.argmax(p, axis=2) for p in self.probs])
        return self._votes

    def mass(self) -> np.ndarray:
        if self._mass is None:
            self._mass = _prob_mass(self.probs)
        return self._mass


def _pick_classes(
    scores: np.ndarray, mass_fn: Callable[[], np.ndarray]
) -> tuple[np.ndarray, np.ndarray]:
    best = scores.max(axis=0)
    winner = scores.argmax(axis=0)  # argmax already favors the lowest index
    tied = scores == best
    multi = tied.sum(axis=0) > 1
    if multi.any():
        cand = np.where(tied, mass_fn(), -np.inf)
        winner = np.where(multi, cand.argmax(axis=0), winner)
    return winner.astype(np.uint8), best


def _check_member_arrays(probs: Sequence[np.ndarray]) -> tuple[int, int, int]:
    if len(probs) < 2:
        raise ValidationError(f"fusion needs at least 2 members, got {len(probs)}")
    shape = probs[0].shape
    for i, p in enumerate(probs):
        if p.ndim != 3 or p.shape != shape:
            raise ValidationError(
                f"member {i} probability map has shape {p.shape}, expected {shape}"
            )
    h, w, c = shape
    if c < 2:
        raise ValidationError(f"fusion needs at least 2 classes, got {c}")
    if c > 256:
        raise ValidationError(f"fused masks are uint8, cannot hold {c} classes")
    return h, w, c


def fuse_arrays(
    probs: Sequence[np.ndarray],
    method: str,
    weights_ece: Sequence[float] | None = None,
    weights_mce: Sequence[float] | None = None,
) -> FusedImage:
    """Fuse member probability arrays (each height x width x classes float32)."""
    h, w, classes = _check_member_arrays(probs)
    shared = _MemberArrays(probs)
    return _fuse(shared, method, weights_ece, weights_mce, h, w, classes)


def _fuse(
    shared: _MemberArrays,
    method: str,
    weights_ece: Sequence[float] | None,
    weights_mce: Sequence[float] | None,
    h: int,
    w: int,
    classes: int,
) -> FusedImage:
    if method == "mvem":
        parts = [
            _fuse(shared, m, weights_ece, weights_mce, h, w, classes)
            for m in CONSTITUENTS
        ]
        votes = np.stack([p.mask.data.astype(np.int64) for p in parts])
        weights: Sequence[float] = (1.0, 1.0, 1.0)
    else:
        votes = shared.votes()
        if method == "majority":
            weights = [1.0] * len(shared.probs)
        elif method in ("weighted_ece", "weighted_mce"):
            weights = weights_ece if method == "weighted_ece" else weights_mce
            if weights is None:
                raise ValidationError(f"method {method!r} requires calibration-derived weights")
            if len(weights) != len(shared.probs):
                raise ValidationError(
                    f"got {len(weights)} weights for {len(shared.probs)} members"
                )
            if any(not x > 0.0 for x in weights):
                raise ValidationError("member weights must be positive")
        else:
            raise ValidationError(f"unknown fusion method {method!r}, expected one of {METHODS}")

    scores = _class_scores(votes, weights, classes)
    winner, best = _pick_classes(scores, shared.mass)
    total = 0.0
    for x in weights:
        total += float(x)
    confidence = best / total
    return FusedImage(LabelMask(h, w, winner, classes=classes), confidence)


def _weights_for(
    method: str,
    members: Sequence[str],
    reports: Mapping[str, CalibrationReport] | None,
    ce_floor: float,
) -> list[float]:
    if reports is None:
        raise ValidationError(f"method {method!r} requires calibration reports for every member")
    missing = [m for m in members if m not in reports]
    if missing:
        raise ValidationError(f"no calibration report for members {missing!r}")
    ordered = [reports[m] for m in members]
    return [mw.weight for mw in derive_weights(ordered, method, ce_floor)]


def load_member_arrays(
    image_id: str, members: Sequence[str], split: str, manifest: Manifest
) -> list[np.ndarray]:
    arrays = []
    for model_id in members:
        path = manifest.prediction_path(model_id, split, image_id)
        try:
            arrays.append(read_probmap(path).data)
        except ValidationError as exc:
            raise type(exc)(f"model {model_id!r} image {image_id!r}: {exc}") from exc
    return arrays


def fuse_image_full(
    image_id: str,
    config: FusionConfig,
    manifest: Manifest,
    reports: Mapping[str, CalibrationReport] | None = None,
    split: str = "testing",
) -> FusedImage:
    """Fuse one image's member predictions under ``config``."""
    config.validate()
    probs = load_member_arrays(image_id, config.members, split, manifest)
    w_ece = w_mce = None
    if config.method in ("weighted_ece", "mvem"):
        w_ece = _weights_for("weighted_ece", config.members, reports, config.ce_floor)
    if config.method in ("weighted_mce", "mvem"):
        w_mce = _weights_for("weighted_mce", config.members, reports, config.ce_floor)
    return fuse_arrays(probs, config.method, weights_ece=w_ece, weights_mce=w_mce)


def fuse_image(
    image_id: str,
    config: FusionConfig,
    manifest: Manifest,
    reports: Mapping[str, CalibrationReport] | None = None,
    split: str = "testing",
) -> LabelMask:
    return fuse_image_full(image_id, config, manifest, reports, split).mask
