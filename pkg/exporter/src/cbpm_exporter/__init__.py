"""Adapter from framework prediction trees to calfuse dataset trees."""

from .export import (
    DEFAULT_RATIOS,
    SPLIT_NAMES,
    SUM_DRIFT,
    ExportError,
    ExportJob,
    array_to_probmap,
    assign_splits,
    emit_manifest,
    export_masks,
    export_probmaps,
    run_export,
    scan_source,
    split_counts,
)

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_RATIOS",
    "SPLIT_NAMES",
    "SUM_DRIFT",
    "ExportError",
    "ExportJob",
    "array_to_probmap",
    "assign_splits",
    "emit_manifest",
    "export_masks",
    "export_probmaps",
    "run_export",
    "scan_source",
    "split_counts",
]
