"""Pairwise descriptor matching with geometric verification.

The pipeline is brute-force L2 matching (exact, no approximation), the ratio
test over the two nearest neighbors, and RANSAC homography estimation; match
similarity is the number of retained correspondences under the configured
mode.  Externally computed deep match sets are imported unverified.

Everything is deterministic given (inputs, seed).  Matching many pairs is
embarrassingly parallel: each pair derives its own seed from the root seed and
the two image ids, so aggregate results do not depend on scheduling.
"""

from __future__ import annotations

import hashlib
import multiprocessing
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from spotmatch import formats
from spotmatch.model import FeatureSet, MatchResult, SpotmatchError, ValidationError

COLLINEAR_TOL = 1e-6


class UnderdeterminedError(SpotmatchError):
    """Fewer correspondences than the minimal sample size."""


class DegenerateGeometryError(SpotmatchError):
    """Every sampled quadruple was collinear; no hypothesis could be formed."""


@dataclass(frozen=True)
class MatchConfig:
    """Matching and verification knobs.

    similarity_mode "ransac_inlier_count" counts RANSAC inliers (the classical
    verified score); "raw_count" counts ratio-test survivors (the mode used for
    deep matchers that need no extra spatial consistency check).
    """

    ratio: float = 0.75
    ransac_iterations: int = 2000
    inlier_threshold_px: float = 3.0
    min_matches_for_ransac: int = 4
    similarity_mode: str = "ransac_inlier_count"
    mutual_check: bool = False

    def __post_init__(self) -> None:
        if not 0.0 < self.ratio <= 1.0:
            raise ValidationError(f"ratio must be in (0, 1], got {self.ratio}")
        if self.ransac_iterations < 1:
            raise ValidationError("ransac_iterations must be >= 1")
        if self.inlier_threshold_px <= 0:
            raise ValidationError("inlier_threshold_px must be > 0")
        if self.min_matches_for_ransac < 4:
            raise ValidationError("min_matches_for_ransac must be >= 4")
        if self.similarity_mode not in ("raw_count", "ransac_inlier_count"):
            raise ValidationError(f"unknown similarity_mode {self.similarity_mode!r}")


# ---------------------------------------------------------------------------
# Brute-force nearest neighbors and ratio test


def match_bruteforce(desc_a: np.ndarray, desc_b: np.ndarray) -> np.ndarray:
    """Exact two-nearest-neighbor search from every row of desc_a into desc_b.

    Returns an (n, 4) float64 array with columns (index_a, index_b, d1, d2)
    where d1 <= d2 are Euclidean distances; d2 = +inf when desc_b has a single
    row.  The returned distances are recomputed exactly, so they agree with a
    naive double loop to the last bit.
    """
    a = np.asarray(desc_a, dtype=np.float64)
    b = np.asarray(desc_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise SpotmatchError("descriptor matrices must be 2-D")
    if a.shape[0] and b.shape[0] and a.shape[1] != b.shape[1]:
        raise SpotmatchError(
            f"descriptor dimensions differ: {a.shape[1]} vs {b.shape[1]}"
        )
    n, m = a.shape[0], b.shape[0]
    if n == 0 or m == 0:
        return np.zeros((0, 4), dtype=np.float64)

    # Gram trick for candidate selection, exact recompute for reported values.
    sq = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * (a @ b.T)
    if m == 1:
        idx1 = np.zeros(n, dtype=np.int64)
        idx2 = idx1
    else:
        part = np.argpartition(sq, 1, axis=1)[:, :2]
        d_part = np.take_along_axis(sq, part, axis=1)
        swap = (d_part[:, 0] > d_part[:, 1]) | (
            (d_part[:, 0] == d_part[:, 1]) & (part[:, 0] > part[:, 1])
        )
        idx1 = np.where(swap, part[:, 1], part[:, 0])
        idx2 = np.where(swap, part[:, 0], part[:, 1])
    diff1 = a - b[idx1]
    d1 = np.sqrt(np.einsum("ij,ij->i", diff1, diff1))
    if m == 1:
        d2 = np.full(n, np.inf)
    else:
        diff2 = a - b[idx2]
        d2 = np.sqrt(np.einsum("ij,ij->i", diff2, diff2))
    return np.column_stack([np.arange(n, dtype=np.float64), idx1, d1, d2])


def ratio_test(candidates: np.ndarray, ratio: float) -> np.ndarray:
    """Keep candidates whose nearest neighbor is unambiguous: d1 < ratio * d2."""
    if candidates.shape[0] == 0:
        return candidates
    d1 = candidates[:, 2]
    d2 = candidates[:, 3]
    return candidates[d1 < ratio * d2]


def _mutual_filter(survivors: np.ndarray, desc_a: np.ndarray, desc_b: np.ndarray) -> np.ndarray:
    """Keep pairs that are also nearest when matching from b back into a."""
    if survivors.shape[0] == 0:
        return survivors
    reverse = match_bruteforce(desc_b, desc_a)
    back = reverse[:, 1].astype(np.int64)
    ia = survivors[:, 0].astype(np.int64)
    ib = survivors[:, 1].astype(np.int64)
    return survivors[back[ib] == ia]


# ---------------------------------------------------------------------------
# RANSAC homography


def _normalization(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hartley normalization per sample: returns (normalized points, T (…,3,3))."""
    centroid = points.mean(axis=-2, keepdims=True)
    shifted = points - centroid
    dist = np.sqrt((shifted**2).sum(axis=-1)).mean(axis=-1)
    dist = np.where(dist < 1e-12, 1.0, dist)
    scale = np.sqrt(2.0) / dist
    normalized = shifted * scale[..., None, None]
    batch = points.shape[:-2]
    T = np.zeros(batch + (3, 3))
    T[..., 0, 0] = scale
    T[..., 1, 1] = scale
    T[..., 2, 2] = 1.0
    T[..., 0, 2] = -scale * centroid[..., 0, 0]
    T[..., 1, 2] = -scale * centroid[..., 0, 1]
    return normalized, T


def _dlt_system(pa: np.ndarray, pb: np.ndarray) -> np.ndarray:
    """Stack the 2-rows-per-correspondence DLT system: (…, 2n, 9)."""
    batch = pa.shape[:-2]
    n = pa.shape[-2]
    x, y = pa[..., 0], pa[..., 1]
    u, v = pb[..., 0], pb[..., 1]
    zeros = np.zeros_like(x)
    ones = np.ones_like(x)
    row1 = np.stack([-x, -y, -ones, zeros, zeros, zeros, u * x, u * y, u], axis=-1)
    row2 = np.stack([zeros, zeros, zeros, -x, -y, -ones, v * x, v * y, v], axis=-1)
    return np.concatenate([row1, row2], axis=-2).reshape(batch + (2 * n, 9))


def _solve_h(pa: np.ndarray, pb: np.ndarray) -> np.ndarray:
    """Normalized DLT for point sets (…, n, 2) -> homographies (…, 3, 3)."""
    na, Ta = _normalization(pa)
    nb, Tb = _normalization(pb)
    A = _dlt_system(na, nb)
    # Null vector via the smallest eigenvector of A^T A (batched, symmetric).
    M = np.swapaxes(A, -1, -2) @ A
    _, vecs = np.linalg.eigh(M)
    h = vecs[..., :, 0]
    H_norm = h.reshape(h.shape[:-1] + (3, 3))
    # Denormalize: H = Tb^-1 @ H_norm @ Ta.
    Tb_inv = np.zeros_like(Tb)
    s = Tb[..., 0, 0]
    Tb_inv[..., 0, 0] = 1.0 / s
    Tb_inv[..., 1, 1] = 1.0 / s
    Tb_inv[..., 2, 2] = 1.0
    Tb_inv[..., 0, 2] = -Tb[..., 0, 2] / s
    Tb_inv[..., 1, 2] = -Tb[..., 1, 2] / s
    return Tb_inv @ H_norm @ Ta


def _collinear_any(points: np.ndarray) -> np.ndarray:
    """True where any three of the four points are collinear (…, 4, 2)."""
    flags = None
    for i, j, k in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        v1 = points[..., j, :] - points[..., i, :]
        v2 = points[..., k, :] - points[..., i, :]
        cross = np.abs(v1[..., 0] * v2[..., 1] - v1[..., 1] * v2[..., 0])
        bad = cross < COLLINEAR_TOL
        flags = bad if flags is None else (flags | bad)
    return flags


def _draw_quads(rng: np.random.Generator, count: int, m: int) -> np.ndarray:
    """Draw quadruples of distinct correspondence indices."""
    out = np.empty((count, 4), dtype=np.int64)
    filled = 0
    while filled < count:
        cand = rng.integers(0, m, size=(count - filled, 4))
        distinct = (
            (cand[:, 0] != cand[:, 1]) & (cand[:, 0] != cand[:, 2]) & (cand[:, 0] != cand[:, 3])
            & (cand[:, 1] != cand[:, 2]) & (cand[:, 1] != cand[:, 3])
            & (cand[:, 2] != cand[:, 3])
        )
        take = cand[distinct]
        out[filled : filled + take.shape[0]] = take
        filled += take.shape[0]
    return out


def _projection_errors(H: np.ndarray, pts_a: np.ndarray, pts_b: np.ndarray) -> np.ndarray:
    """Squared reprojection error of H (…, 3, 3) applied to pts_a (m, 2)."""
    ones = np.ones((pts_a.shape[0], 1))
    pa_h = np.concatenate([pts_a, ones], axis=1).T  # (3, m)
    proj = H @ pa_h  # (…, 3, m)
    w = proj[..., 2, :]
    safe_w = np.where(np.abs(w) < 1e-12, 1.0, w)
    u = proj[..., 0, :] / safe_w
    v = proj[..., 1, :] / safe_w
    err = (u - pts_b[:, 0]) ** 2 + (v - pts_b[:, 1]) ** 2
    return np.where(np.abs(w) < 1e-12, np.inf, err)


def estimate_homography_ransac(
    correspondences: np.ndarray,
    kp_a: np.ndarray,
    kp_b: np.ndarray,
    config: MatchConfig,
    seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    """RANSAC homography over correspondences; returns (H, inlier indices).

    Runs config.ransac_iterations hypotheses of 4 correspondences each (the
    8-DOF minimal sample, solved by normalized DLT); degenerate quadruples are
    resampled without consuming an iteration up to a 10x draw budget.  The
    hypothesis with the most inliers wins (ties: first under the seeded
    order); the returned homography is a least-squares refit on its inliers.
    """
    corr = np.asarray(correspondences, dtype=np.float64)
    m = corr.shape[0]
    if m < max(4, config.min_matches_for_ransac):
        raise UnderdeterminedError(f"underdetermined: {m} correspondence(s), need >= 4")
    pts_a = kp_a[corr[:, 0].astype(np.int64), :2].astype(np.float64)
    pts_b = kp_b[corr[:, 1].astype(np.int64), :2].astype(np.float64)

    rng = np.random.Generator(np.random.PCG64(seed))
    iterations = config.ransac_iterations
    samples = np.empty((iterations, 4), dtype=np.int64)
    filled = 0
    draws = 0
    while filled < iterations and draws < 10 * iterations:
        need = iterations - filled
        batch = _draw_quads(rng, need, m)
        draws += need
        ok = ~(_collinear_any(pts_a[batch]) | _collinear_any(pts_b[batch]))
        take = batch[ok]
        samples[filled : filled + take.shape[0]] = take
        filled += take.shape[0]
    if filled == 0:
        raise DegenerateGeometryError("degenerate geometry: all sampled quadruples collinear")
    samples = samples[:filled]

    H_all = _solve_h(pts_a[samples], pts_b[samples])
    err = _projection_errors(H_all, pts_a, pts_b)
    inlier_mask = err < config.inlier_threshold_px**2
    counts = inlier_mask.sum(axis=1)
    best = int(np.argmax(counts))  # argmax takes the first maximum: seeded order
    best_inliers = np.nonzero(inlier_mask[best])[0]
    if best_inliers.size < 4:
        # No hypothesis explained even its own sample within threshold.
        best_inliers = samples[best]
        best_inliers = np.unique(best_inliers)
    H = _solve_h(pts_a[best_inliers], pts_b[best_inliers])
    if abs(H[2, 2]) > 1e-8:
        H = H / H[2, 2]
    else:
        H = H / np.linalg.norm(H)
    return H, np.sort(best_inliers)


# ---------------------------------------------------------------------------
# Pair matching


def pair_seed(root_seed: int, image_id_a: str, image_id_b: str) -> int:
    """Stable per-pair seed; independent of scheduling or pair order."""
    digest = hashlib.sha256(
        f"{root_seed}|{image_id_a}|{image_id_b}".encode("utf-8")
    ).digest()
    return int.from_bytes(digest[:8], "little")


def match_pair(
    fs_a: FeatureSet, fs_b: FeatureSet, config: MatchConfig = MatchConfig(), seed: int = 0
) -> MatchResult:
    """Match one image pair and score it under the configured similarity mode.

    In ransac mode, pairs whose RANSAC prerequisites fail (too few ratio-test
    survivors, or degenerate geometry) score 0 unverified: a weak pair must
    not outrank verified ones.
    """
    if len(fs_a) and len(fs_b) and fs_a.descriptor_dim != fs_b.descriptor_dim:
        raise SpotmatchError(
            f"descriptor dimensions differ: {fs_a.descriptor_dim} vs {fs_b.descriptor_dim}"
        )
    candidates = match_bruteforce(fs_a.descriptors, fs_b.descriptors)
    survivors = ratio_test(candidates, config.ratio)
    if config.mutual_check:
        survivors = _mutual_filter(survivors, fs_a.descriptors, fs_b.descriptors)

    def corr_tuple(rows: np.ndarray) -> tuple[tuple[int, int, float], ...]:
        return tuple((int(r[0]), int(r[1]), float(r[2])) for r in rows)

    if config.similarity_mode == "raw_count":
        return MatchResult(
            image_a=fs_a.image_id,
            image_b=fs_b.image_id,
            correspondences=corr_tuple(survivors),
            similarity=survivors.shape[0],
            verified=False,
        )

    if survivors.shape[0] < max(4, config.min_matches_for_ransac):
        return MatchResult(
            image_a=fs_a.image_id, image_b=fs_b.image_id,
            correspondences=(), similarity=0, verified=False,
        )
    try:
        H, inliers = estimate_homography_ransac(
            survivors, fs_a.keypoints, fs_b.keypoints, config, seed
        )
    except DegenerateGeometryError:
        return MatchResult(
            image_a=fs_a.image_id, image_b=fs_b.image_id,
            correspondences=(), similarity=0, verified=False,
        )
    retained = survivors[inliers]
    return MatchResult(
        image_a=fs_a.image_id,
        image_b=fs_b.image_id,
        correspondences=corr_tuple(retained),
        similarity=retained.shape[0],
        verified=True,
        homography=H,
    )


def import_matches(path: str | Path) -> MatchResult:
    """Read an adapter-produced match file; similarity = correspondence count."""
    result, _, _ = formats.read_matches(path)
    return result


# ---------------------------------------------------------------------------
# Batch engine (embarrassingly parallel, deterministic aggregate)

_WORKER: dict = {}


def _init_worker(features: Mapping[str, FeatureSet], config: MatchConfig, root_seed: int) -> None:
    _WORKER["features"] = features
    _WORKER["config"] = config
    _WORKER["root_seed"] = root_seed


def _score_one(pair: tuple[str, str]) -> tuple[tuple[str, str], int]:
    id_a, id_b = pair
    features = _WORKER["features"]
    config = _WORKER["config"]
    seed = pair_seed(_WORKER["root_seed"], id_a, id_b)
    result = match_pair(features[id_a], features[id_b], config, seed)
    return pair, result.similarity


def score_pairs(
    pairs: Sequence[tuple[str, str]],
    features: Mapping[str, FeatureSet],
    config: MatchConfig = MatchConfig(),
    root_seed: int = 0,
    workers: int = 1,
) -> dict[tuple[str, str], int]:
    """Match similarity for many (image_id_a, image_id_b) pairs.

    With workers > 1 a fork-based process pool is used; per-pair seeds keep
    the result independent of scheduling.
    """
    if workers <= 1 or len(pairs) < 8:
        _init_worker(features, config, root_seed)
        return dict(_score_one(p) for p in pairs)
    ctx = multiprocessing.get_context("fork")
    chunk = max(8, len(pairs) // (workers * 16))
    with ctx.Pool(workers, initializer=_init_worker, initargs=(features, config, root_seed)) as pool:
        return dict(pool.imap_unordered(_score_one, pairs, chunksize=chunk))
