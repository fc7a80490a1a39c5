"""Two unsupervised detector backends behind one scoring interface.

Both kinds train on normal patches only and emit per-pixel nonnegative
score maps; higher means more defect-likely. ``load_detector`` restores a
checkpoint directory written by either backend.
"""

import json
from pathlib import Path

from ..errors import PatchguardError
from .defects import SyntheticDefectSpec, inject_defect
from .feature import FeatureDetector, FeatureDetectorConfig, train_feature_detector
from .recon import ReconDetectorConfig, ReconstructionDetector, train_reconstruction_detector

__all__ = [
    "SyntheticDefectSpec",
    "inject_defect",
    "FeatureDetector",
    "FeatureDetectorConfig",
    "train_feature_detector",
    "ReconDetectorConfig",
    "ReconstructionDetector",
    "train_reconstruction_detector",
    "load_detector",
    "DETECTOR_KINDS",
]

DETECTOR_KINDS = ("feature", "reconstruction")


def load_detector(checkpoint_dir):
    checkpoint_dir = Path(checkpoint_dir)
    config_path = checkpoint_dir / "config.json"
    if not config_path.is_file():
        raise PatchguardError(f"no detector checkpoint at {checkpoint_dir}")
    kind = json.loads(config_path.read_text()).get("kind")
    if kind == "feature":
        return FeatureDetector.load(checkpoint_dir)
    if kind == "reconstruction":
        return ReconstructionDetector.load(checkpoint_dir)
    raise PatchguardError(f"unknown detector kind {kind!r} in {config_path}")
