"""Randomized synthesis of multi-contrast training volumes and a group-convolutional
segmentation network that accepts any number of aligned input scans."""

from .config import EngineConfig, read_config, write_config
from .core import (
    GridSpec,
    LabelMap,
    LabelMergeTable,
    Protocol,
    Volume,
    default_protocol,
    dice_overlap,
    normalize,
    remap_labels,
    resample,
    resample_to,
)
from .engine import Session, TrainingSample, emit_dataset, fit_nonbrain_gmm, generate_sample
from .io import read_volume, write_volume

__version__ = "0.1.0"

__all__ = [
    "EngineConfig",
    "GridSpec",
    "LabelMap",
    "LabelMergeTable",
    "Protocol",
    "Session",
    "TrainingSample",
    "Volume",
    "default_protocol",
    "dice_overlap",
    "emit_dataset",
    "fit_nonbrain_gmm",
    "generate_sample",
    "normalize",
    "read_config",
    "read_volume",
    "remap_labels",
    "resample",
    "resample_to",
    "write_config",
    "write_volume",
]
