"""spotmatch: two-stage photographic re-identification of patterned animals.

Stage 1 ranks a gallery by cosine similarity of global embeddings; stage 2
re-ranks the shortlist by local-feature matching with geometric verification.
Includes the evaluation protocol (closed-set top-k, precision-recall,
threshold calibration), a synthetic corpus generator with planted ground
truth, a persistent gallery store, an HTTP review service, and a CLI.
"""

from spotmatch.model import (
    CaptureImage,
    Decision,
    DecisionRecord,
    Embedding,
    FeatureSet,
    Gallery,
    GalleryEntry,
    ImageRaster,
    Keypoint,
    MatchResult,
    RankedCandidates,
    SpotmatchError,
    ValidationError,
    Violation,
    validate_gallery,
)

__version__ = "0.1.0"

__all__ = [
    "CaptureImage",
    "Decision",
    "DecisionRecord",
    "Embedding",
    "FeatureSet",
    "Gallery",
    "GalleryEntry",
    "ImageRaster",
    "Keypoint",
    "MatchResult",
    "RankedCandidates",
    "SpotmatchError",
    "ValidationError",
    "Violation",
    "validate_gallery",
    "__version__",
]
