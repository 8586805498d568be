"""Calibration-weighted ensemble fusion for semantic segmentation."""

from .calibration import (
    BinStat,
    BinTable,
    CalibrationReport,
    CalibrationResult,
    bin_index,
    calibrate_model,
    compute_calibration,
    pixel_confidence,
)
from .fusion import (
    FusedImage,
    FusionConfig,
    ModelWeight,
    derive_weights,
    fuse_arrays,
    fuse_image,
    fuse_image_full,
)
from .metrics import (
    ConfusionCounts,
    MetricAggregate,
    MetricSet,
    aggregate,
    confusion,
    metrics_from_counts,
)
from .synth import SynthModel, SynthSpec, gen_dataset, gen_prediction, gen_truth
from .tensor_store import (
    DataError,
    LabelMask,
    Manifest,
    ProbMap,
    ValidationError,
    load_manifest,
    read_mask,
    read_probmap,
    write_mask,
    write_probmap,
)

__version__ = "0.1.0"

__all__ = [
    "BinStat",
    "BinTable",
    "CalibrationReport",
    "CalibrationResult",
    "ConfusionCounts",
    "DataError",
    "FusedImage",
    "FusionConfig",
    "LabelMask",
    "Manifest",
    "MetricAggregate",
    "MetricSet",
    "ModelWeight",
    "ProbMap",
    "SynthModel",
    "SynthSpec",
    "ValidationError",
    "aggregate",
    "bin_index",
    "calibrate_model",
    "compute_calibration",
    "confusion",
    "derive_weights",
    "fuse_arrays",
    "fuse_image",
    "fuse_image_full",
    "gen_dataset",
    "gen_prediction",
    "gen_truth",
    "load_manifest",
    "metrics_from_counts",
    "pixel_confidence",
    "read_mask",
    "read_probmap",
    "write_mask",
    "write_probmap",
]
