"""Core domain types shared by every stage of the re-identification pipeline.

All types are plain value objects: immutable after construction, validated
eagerly, safe to share between threads.  Gallery mutation happens only through
the store module (single-writer contract); everything here is in-memory.
"""

from __future__ import annotations

import datetime
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

UNIT_NORM_TOL = 1e-6


class SpotmatchError(Exception):
    """Base class for domain errors raised by this package."""


class ValidationError(SpotmatchError):
    """An object violates one of its structural invariants."""


# ---------------------------------------------------------------------------
# Images


@dataclass(frozen=True, eq=False)
class ImageRaster:
    """Row-major image with 1 or 3 channels and intensities in [0, 1].

    ``pixels`` has shape (height, width, channels), dtype float32.
    """

    pixels: np.ndarray

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3:
            raise ValidationError(f"raster must be 2-D or 3-D, got ndim={px.ndim}")
        h, w, c = px.shape
        if h < 1 or w < 1:
            raise ValidationError(f"raster dimensions must be >= 1, got {w}x{h}")
        if c not in (1, 3):
            raise ValidationError(f"raster must have 1 or 3 channels, got {c}")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise ValidationError("raster intensities must lie in [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


@dataclass(frozen=True, eq=False)
class CaptureImage:
    """One photograph of one animal taken on one calendar date.

    ``rotation_quarter_turns`` is the operator-supplied orientation: the number
    of counterclockwise quarter turns that bring the head to the top.  ``mask``
    is a boolean foreground raster aligned with ``raster``; ``bbox`` is
    (x, y, width, height) in pixel coordinates.
    """

    image_id: str
    capture_date: datetime.date
    raster: ImageRaster
    identity_id: Optional[str] = None
    rotation_quarter_turns: int = 0
    mask: Optional[np.ndarray] = None
    bbox: Optional[tuple[int, int, int, int]] = None

    def __post_init__(self) -> None:
        if not self.image_id:
            raise ValidationError("image_id must be a non-empty string")
        if self.rotation_quarter_turns not in (0, 1, 2, 3):
            raise ValidationError(
                f"rotation_quarter_turns must be in 0..3, got {self.rotation_quarter_turns}"
            )
        if self.mask is not None:
            mask = np.asarray(self.mask, dtype=bool)
            if mask.shape != (self.raster.height, self.raster.width):
                raise ValidationError(
                    f"mask shape {mask.shape} does not match raster "
                    f"{(self.raster.height, self.raster.width)}"
                )
            mask.setflags(write=False)
            object.__setattr__(self, "mask", mask)
        if self.bbox is not None:
            x, y, w, h = (int(v) for v in self.bbox)
            if w < 1 or h < 1:
                raise ValidationError(f"bbox sides must be >= 1, got {w}x{h}")
            if x < 0 or y < 0 or x + w > self.raster.width or y + h > self.raster.height:
                raise ValidationError(f"bbox {self.bbox} exceeds raster bounds")
            object.__setattr__(self, "bbox", (x, y, w, h))


# ---------------------------------------------------------------------------
# Local features

# Keypoint array columns (float32): x, y, scale, orientation, response.
KP_X, KP_Y, KP_SCALE, KP_ORIENTATION, KP_RESPONSE = range(5)
KP_FIELDS = 5


@dataclass(frozen=True)
class Keypoint:
    """A localized, oriented, scaled image feature."""

    x: float
    y: float
    scale: float
    orientation: float
    response: float


@dataclass(frozen=True, eq=False)
class FeatureSet:
    """Keypoints plus descriptors for one image.

    ``keypoints`` is an (n, 5) float32 array with columns x, y, scale,
    orientation, response; ``descriptors`` is (n, d) float32.
    ``max_keypoints`` records the budget M under which the set was produced
    (None = unlimited).
    """

    image_id: str
    keypoints: np.ndarray
    descriptors: np.ndarray
    source: str = "classical"  # "classical" | "imported"
    max_keypoints: Optional[int] = None

    def __post_init__(self) -> None:
        kp = np.ascontiguousarray(np.asarray(self.keypoints, dtype=np.float32))
        if kp.ndim != 2 or kp.shape[1] != KP_FIELDS:
            raise ValidationError(f"keypoints must be (n, {KP_FIELDS}), got {kp.shape}")
        desc = np.ascontiguousarray(np.asarray(self.descriptors, dtype=np.float32))
        if desc.ndim != 2:
            raise ValidationError(f"descriptors must be 2-D, got shape {desc.shape}")
        if desc.shape[0] != kp.shape[0]:
            raise ValidationError(
                f"descriptor rows ({desc.shape[0]}) != keypoint count ({kp.shape[0]})"
            )
        if self.source not in ("classical", "imported"):
            raise ValidationError(f"unknown feature source {self.source!r}")
        if self.max_keypoints is not None:
            if self.max_keypoints < 1:
                raise ValidationError("max_keypoints must be >= 1 when set")
            if kp.shape[0] > self.max_keypoints:
                raise ValidationError(
                    f"{kp.shape[0]} keypoints exceed budget M={self.max_keypoints}"
                )
        kp.setflags(write=False)
        desc.setflags(write=False)
        object.__setattr__(self, "keypoints", kp)
        object.__setattr__(self, "descriptors", desc)

    def __len__(self) -> int:
        return self.keypoints.shape[0]

    @property
    def descriptor_dim(self) -> int:
        return self.descriptors.shape[1]

    def keypoint(self, i: int) -> Keypoint:
        x, y, s, o, r = (float(v) for v in self.keypoints[i])
        return Keypoint(x, y, s, o, r)


# ---------------------------------------------------------------------------
# Embeddings


@dataclass(frozen=True, eq=False)
class Embedding:
    """One global feature vector per image, unit-normalized for retrieval."""

    image_id: str
    vector: np.ndarray
    normalized: bool = True

    def __post_init__(self) -> None:
        vec = np.ascontiguousarray(np.asarray(self.vector, dtype=np.float32))
        if vec.ndim != 1 or vec.size < 1:
            raise ValidationError(f"embedding must be a non-empty 1-D vector, got {vec.shape}")
        if self.normalized:
            norm = float(np.linalg.norm(vec.astype(np.float64)))
            if abs(norm - 1.0) > 1e-5:
                raise ValidationError(f"normalized embedding has norm {norm}")
        vec.setflags(write=False)
        object.__setattr__(self, "vector", vec)

    @property
    def dim(self) -> int:
        return self.vector.shape[0]


# ---------------------------------------------------------------------------
# Matches


@dataclass(frozen=True, eq=False)
class MatchResult:
    """Outcome of matching one image pair.

    ``correspondences`` is a list of (keypoint index a, keypoint index b,
    score) triples; ``similarity`` is the number of retained correspondences
    under the configured mode.  ``homography`` is present iff ``verified``.
    """

    image_a: str
    image_b: str
    correspondences: tuple[tuple[int, int, float], ...]
    similarity: int
    verified: bool = False
    homography: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        corr = tuple((int(a), int(b), float(s)) for a, b, s in self.correspondences)
        object.__setattr__(self, "correspondences", corr)
        if self.similarity < 0:
            raise ValidationError("similarity must be non-negative")
        if self.similarity != len(corr):
            raise ValidationError(
                f"similarity {self.similarity} != retained correspondences {len(corr)}"
            )
        if self.verified != (self.homography is not None):
            raise ValidationError("homography must be present iff verified")
        if self.homography is not None:
            h = np.asarray(self.homography, dtype=np.float64)
            if h.shape != (3, 3):
                raise ValidationError(f"homography must be 3x3, got {h.shape}")
            h.setflags(write=False)
            object.__setattr__(self, "homography", h)


# ---------------------------------------------------------------------------
# Gallery


@dataclass(frozen=True)
class GalleryEntry:
    """Metadata for one catalogued capture; pixel/feature payloads live on disk."""

    image_id: str
    capture_date: datetime.date
    identity_id: Optional[str] = None
    rotation_quarter_turns: int = 0
    image_path: Optional[str] = None
    mask_path: Optional[str] = None


@dataclass(frozen=True)
class DecisionRecord:
    """One expert review decision; the log is strictly append-only."""

    query_id: str
    action: str  # "accept" | "new_individual" | "defer"
    identity_id: Optional[str]
    reviewer: str
    timestamp: str  # ISO 8601


@dataclass
class Gallery:
    """Identity-labeled collection of captures with an append-only decision log."""

    entries: dict[str, GalleryEntry] = field(default_factory=dict)
    identities: dict[str, set[str]] = field(default_factory=dict)
    decision_log: list[DecisionRecord] = field(default_factory=list)

    def dates_of(self, identity_id: str) -> set[datetime.date]:
        return {
            self.entries[i].capture_date
            for i in self.identities.get(identity_id, set())
            if i in self.entries
        }

    def identity_of(self, image_id: str) -> Optional[str]:
        entry = self.entries.get(image_id)
        return entry.identity_id if entry else None

    @property
    def image_ids(self) -> list[str]:
        return sorted(self.entries)


@dataclass(frozen=True)
class Violation:
    """One invariant violation found by validate_gallery."""

    entity: str
    rule: str
    detail: str


def validate_gallery(gallery: Gallery) -> list[Violation]:
    """Check Gallery structural invariants; violations are data, not errors."""
    violations: list[Violation] = []
    seen_in: dict[str, str] = {}
    for identity_id, image_ids in gallery.identities.items():
        for image_id in sorted(image_ids):
            if image_id not in gallery.entries:
                violations.append(
                    Violation(identity_id, "dangling image_id",
                              f"identity {identity_id} maps to missing image {image_id}")
                )
            if image_id in seen_in and seen_in[image_id] != identity_id:
                violations.append(
                    Violation(image_id, "identity overlap",
                              f"image {image_id} under both {seen_in[image_id]} and {identity_id}")
                )
            seen_in.setdefault(image_id, identity_id)
    for image_id, entry in gallery.entries.items():
        if entry.identity_id is not None:
            members = gallery.identities.get(entry.identity_id, set())
            if image_id not in members:
                violations.append(
                    Violation(image_id, "unindexed identity",
                              f"entry labeled {entry.identity_id} missing from identity index")
                )
    return violations


# ---------------------------------------------------------------------------
# Ranked candidates


@dataclass(frozen=True)
class Decision:
    """Open-set outcome for a query set: an accepted identity or a new one."""

    kind: str  # "match" | "new_individual"
    score: float
    identity_id: Optional[str] = None

    def __post_init__(self) -> None:
        if self.kind not in ("match", "new_individual"):
            raise ValidationError(f"unknown decision kind {self.kind!r}")
        if self.kind == "match" and self.identity_id is None:
            raise ValidationError("match decision requires an identity_id")
        if self.kind == "new_individual" and self.identity_id is not None:
            raise ValidationError("new_individual decision carries no identity_id")


@dataclass(frozen=True)
class RankedCandidates:
    """Ordered gallery matches for one query set.

    ``stage1`` maps each query image to its ranked (gallery image, cosine)
    shortlist; ``stage2`` is the pooled (gallery image, match similarity) list
    sorted by similarity descending, ties broken by ascending image_id.
    """

    query_image_ids: tuple[str, ...]
    stage1: tuple[tuple[str, tuple[tuple[str, float], ...]], ...]
    stage2: tuple[tuple[str, int], ...]
    decision: Decision
    threshold_used: float

    def stage1_for(self, query_id: str) -> tuple[tuple[str, float], ...]:
        for qid, ranking in self.stage1:
            if qid == query_id:
                return ranking
        raise KeyError(query_id)


def sort_ranked(pairs: Iterable[tuple[str, float]]) -> list[tuple[str, float]]:
    """Descending by score, ties by ascending image_id (the global tie-break)."""
    return sorted(pairs, key=lambda p: (-p[1], p[0]))


def check_ranked_candidates(rc: RankedCandidates) -> None:
    """Raise ValidationError if the stage-2 list escapes the stage-1 shortlists."""
    allowed: set[str] = set()
    for _, ranking in rc.stage1:
        allowed.update(image_id for image_id, _ in ranking)
    if rc.stage1:
        stray = [image_id for image_id, _ in rc.stage2 if image_id not in allowed]
        if stray:
            raise ValidationError(f"stage2 entries outside stage1 shortlists: {stray[:5]}")
    sims = [s for _, s in rc.stage2]
    ids = [i for i, _ in rc.stage2]
    resorted = sort_ranked([(i, float(s)) for i, s in rc.stage2])
    if [(i, float(s)) for i, s in zip(ids, sims)] != resorted:
        raise ValidationError("stage2 list is not sorted by (similarity desc, image_id asc)")
