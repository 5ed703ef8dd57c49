"""Suspicious-region pipeline: phantom generation, 2.5D attention classifier,
activation maps.

All volume arrays are numpy C-order, indexed ``[z, y, x]``; shape tuples use
the same order.
"""

from ._core import (
    FormatError,
    IoError,
    Model,
    apply_lung_window,
    generate_case,
    preprocess_case,
    resample_trilinear,
    roc_auc,
    select_layer,
)

__all__ = [
    "FormatError",
    "IoError",
    "Model",
    "apply_lung_window",
    "generate_case",
    "preprocess_case",
    "resample_trilinear",
    "roc_auc",
    "select_layer",
]
