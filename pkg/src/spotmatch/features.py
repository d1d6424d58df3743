"""Local-feature extraction API: classical detector plus import of deep features.

The classical path detects difference-of-Gaussians keypoints and 128-d
gradient-histogram descriptors (see sift.py).  Externally computed deep
features arrive through the shared binary feature-file format and are tagged
source="imported"; this module never runs a network.

Note the detection-threshold knobs are not comparable across sources: the
classical contrast_threshold acts on DoG contrast, while imported extractors
apply their own score threshold before the file is written.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from spotmatch import formats, sift
from spotmatch.model import FeatureSet, ImageRaster, SpotmatchError, ValidationError
from spotmatch.preprocess import to_grayscale

MIN_IMAGE_SIDE = 32


@dataclass(frozen=True)
class DetectorConfig:
    """Knobs of the classical detector; max_keypoints=None means unlimited."""

    max_keypoints: Optional[int] = None
    contrast_threshold: float = 0.04
    edge_threshold: float = 10.0
    n_octaves: int = 4
    scales_per_octave: int = 3

    def __post_init__(self) -> None:
        if self.max_keypoints is not None and self.max_keypoints < 1:
            raise ValidationError("max_keypoints must be >= 1 when set")
        if self.contrast_threshold <= 0 or self.edge_threshold <= 0:
            raise ValidationError("thresholds must be > 0")
        if self.n_octaves < 1 or self.scales_per_octave < 1:
            raise ValidationError("pyramid shape must be >= 1 octave and scale")


def detect_and_describe(
    raster: ImageRaster, config: DetectorConfig = DetectorConfig(), image_id: str = ""
) -> FeatureSet:
    """Detect keypoints and descriptors on one image under budget M.

    Keypoints are retained by descending response when the budget binds; zero
    keypoints is a valid result.
    """
    if min(raster.width, raster.height) < MIN_IMAGE_SIDE:
        raise SpotmatchError(
            f"image too small for detection: {raster.width}x{raster.height} "
            f"(minimum side {MIN_IMAGE_SIDE})"
        )
    gray = to_grayscale(raster)
    keypoints, descriptors = sift.detect_and_describe_gray(
        gray,
        n_octaves=config.n_octaves,
        scales_per_octave=config.scales_per_octave,
        contrast_threshold=config.contrast_threshold,
        edge_threshold=config.edge_threshold,
    )
    if config.max_keypoints is not None and keypoints.shape[0] > config.max_keypoints:
        keypoints = keypoints[: config.max_keypoints]
        descriptors = descriptors[: config.max_keypoints]
    return FeatureSet(
        image_id=image_id,
        keypoints=keypoints,
        descriptors=descriptors,
        source="classical",
        max_keypoints=config.max_keypoints,
    )


def truncate_features(features: FeatureSet, max_keypoints: int) -> FeatureSet:
    """Re-budget a feature set to the top max_keypoints by response.

    Detection ranks by response, so truncating a larger budget equals
    detecting under the smaller one.
    """
    if max_keypoints < 1:
        raise ValidationError("max_keypoints must be >= 1")
    kp = features.keypoints
    if kp.shape[0] > max_keypoints:
        order = np.lexsort((kp[:, 3], kp[:, 2], kp[:, 1], kp[:, 0], -kp[:, 4]))
        keep = np.sort(order[:max_keypoints])
        kp = kp[keep]
        desc = features.descriptors[keep]
    else:
        desc = features.descriptors
    return FeatureSet(
        image_id=features.image_id,
        keypoints=kp,
        descriptors=desc,
        source=features.source,
        max_keypoints=max_keypoints,
    )


def import_features(path: str | Path) -> FeatureSet:
    """Read an adapter-produced feature file; source becomes "imported"."""
    features = formats.read_features(path)
    if features.source == "imported":
        return features
    return FeatureSet(
        image_id=features.image_id,
        keypoints=features.keypoints,
        descriptors=features.descriptors,
        source="imported",
        max_keypoints=features.max_keypoints,
    )


def export_features(features: FeatureSet, path: str | Path) -> None:
    formats.write_features(features, path)
