"""Stage-1 global retrieval: cosine similarity over unit embeddings.

Galleries at this scale fit exact dense search, so similarities are computed
with a single matrix product and no approximate index; this keeps evaluation
bit-reproducible.  Shortlist exclusion is a caller-supplied predicate so the
same operation serves the evaluation protocol (same-date exclusion) and
production (exclude nothing).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from spotmatch.model import GalleryEntry, ImageRaster, SpotmatchError, ValidationError
from spotmatch.preprocess import resize_bilinear, to_grayscale


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    """Row-per-image embedding matrix aligned with ``image_ids``."""

    image_ids: tuple[str, ...]
    matrix: np.ndarray
    normalized: bool = False

    def __post_init__(self) -> None:
        mat = np.ascontiguousarray(np.asarray(self.matrix, dtype=np.float64))
        if mat.ndim != 2:
            raise ValidationError(f"embedding matrix must be 2-D, got {mat.shape}")
        if mat.shape[0] != len(self.image_ids):
            raise ValidationError(
                f"{mat.shape[0]} rows != {len(self.image_ids)} image ids"
            )
        if self.normalized and mat.shape[0]:
            norms = np.linalg.norm(mat, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                worst = float(np.abs(norms - 1.0).max())
                raise ValidationError(f"rows not unit-norm (max deviation {worst:.2e})")
        mat.setflags(write=False)
        object.__setattr__(self, "matrix", mat)
        object.__setattr__(self, "image_ids", tuple(self.image_ids))

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def l2_normalize(vec: np.ndarray) -> np.ndarray:
    """vec / ||vec||2; zero vectors are an error."""
    v = np.asarray(vec, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise SpotmatchError("zero norm: cannot normalize the zero vector")
    return v / norm


def normalize_rows(matrix: np.ndarray, image_ids: Sequence[str]) -> EmbeddingMatrix:
    mat = np.asarray(matrix, dtype=np.float64)
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        bad = [image_ids[i] for i in np.nonzero(norms[:, 0] == 0.0)[0]]
        raise SpotmatchError(f"zero norm embedding for {bad[:5]}")
    return EmbeddingMatrix(tuple(image_ids), mat / norms, normalized=True)


def cosine_matrix(queries: EmbeddingMatrix, gallery: EmbeddingMatrix) -> np.ndarray:
    """All pairwise cosine similarities as one matrix product (n_q, n_g)."""
    if not queries.normalized or not gallery.normalized:
        raise SpotmatchError("cosine_matrix requires normalized embedding matrices")
    if queries.dim != gallery.dim:
        raise SpotmatchError(
            f"embedding dimensions differ: {queries.dim} vs {gallery.dim}"
        )
    return queries.matrix @ gallery.matrix.T


def topk_shortlist(
    sim_row: np.ndarray,
    entries: Sequence[GalleryEntry],
    k: int,
    exclude: Optional[Callable[[GalleryEntry], bool]] = None,
) -> list[tuple[str, float]]:
    """The k best non-excluded gallery images for one query.

    Sorted by score descending, ties by ascending image_id; returns fewer than
    k when the gallery is small.
    """
    if k < 1:
        raise SpotmatchError(f"k must be >= 1, got {k}")
    if len(sim_row) != len(entries):
        raise SpotmatchError(f"{len(sim_row)} scores != {len(entries)} entries")
    scored = [
        (entry.image_id, float(score))
        for entry, score in zip(entries, sim_row)
        if exclude is None or not exclude(entry)
    ]
    scored.sort(key=lambda p: (-p[1], p[0]))
    return scored[:k]


def downsample_embedding(raster: ImageRaster, grid: int = 16) -> np.ndarray:
    """Stand-in global embedding: the masked image downsampled to grid^2 pixels.

    Used wherever a learned embedding model would supply stage-1 vectors; the
    result is unit-normalized.
    """
    gray = to_grayscale(raster).astype(np.float64)
    small = resize_bilinear(gray, grid, grid)
    return l2_normalize(small.ravel())
