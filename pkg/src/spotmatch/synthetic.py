"""Synthetic identity-labeled capture datasets with planted ground truth.

Each identity is a deformable spot pattern on an elliptical body: bright
spots and a fine identity-stable micro-texture on a dark ground.  A capture
renders the canonical pattern through a session-specific similarity jitter
plus a smooth nonrigid warp, over a textured background, with illumination
and noise; the exact pixel-level correspondence to the canonical frame is
returned for matcher validation.

Everything derives deterministically from integer seeds; capture dates are
one per session, so every identity with >= 2 sessions is multi-date.
"""

from __future__ import annotations

import csv
import datetime
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from spotmatch.model import CaptureImage, ImageRaster, ValidationError
from spotmatch.preprocess import sample_bilinear, save_image, save_mask

MIN_SPOTS = 8
MAX_SPOTS = 60
MIN_SPOT_RADIUS = 0.010   # fraction of body length, within the (0.005, 0.08] envelope
MAX_SPOT_RADIUS = 0.050
BASE_DATE = datetime.date(2020, 1, 1)

MANIFEST_COLUMNS = [
    "image_path", "mask_path", "identity_id", "capture_date", "rotation_quarter_turns",
]


@dataclass(frozen=True)
class IdentityPattern:
    """Canonical spot pattern of one individual, in unit-square coordinates."""

    identity_id: str
    spots: np.ndarray          # (n, 6): cx, cy, radius, intensity, aspect, orientation
    outline: tuple[float, float, float, float]  # cx, cy, semi_x, semi_y
    texture_seed: int

    def __post_init__(self) -> None:
        spots = np.asarray(self.spots, dtype=np.float64)
        if not MIN_SPOTS <= spots.shape[0] <= MAX_SPOTS:
            raise ValidationError(f"spot count {spots.shape[0]} outside [{MIN_SPOTS}, {MAX_SPOTS}]")
        if np.any(spots[:, 2] <= 0.005) or np.any(spots[:, 2] > 0.08):
            raise ValidationError("spot radii must lie in (0.005, 0.08] of body length")
        cx, cy, rx, ry = self.outline
        u = (spots[:, 0] - cx) / rx
        v = (spots[:, 1] - cy) / ry
        if np.any(u * u + v * v > 1.0):
            raise ValidationError("spots must lie inside the body outline")
        spots.setflags(write=False)
        object.__setattr__(self, "spots", spots)

    @property
    def body_length(self) -> float:
        return 2.0 * self.outline[3]


@dataclass(frozen=True)
class SessionParams:
    """Per-session rendering conditions; jitters are per-capture draw ranges."""

    deformation_amplitude: float = 0.03   # fraction of body length
    rotation_jitter: float = 0.05         # radians
    scale_jitter: float = 0.04            # fraction
    illumination_gain: float = 1.0
    illumination_bias: float = 0.0
    noise_sigma: float = 0.01
    background_seed: int = 0

    def __post_init__(self) -> None:
        if self.deformation_amplitude < 0:
            raise ValidationError("deformation_amplitude must be >= 0")
        if not 0.0 <= self.scale_jitter <= 0.5:
            raise ValidationError("scale_jitter must lie in [0, 0.5]")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")


def _rng(*entropy: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(entropy))))


def generate_identity(seed: int, identity_id: Optional[str] = None) -> IdentityPattern:
    """Deterministic pattern from one seed; distinct seeds give distinct spots.

    Spots are ellipses: columns 4-5 of ``spots`` carry aspect (minor/major)
    and orientation; column 6 is reserved extra shape variation.
    """
    rng = _rng(seed, 0xB0D7)
    cx, cy = 0.5, 0.5
    rx = rng.uniform(0.30, 0.36)
    ry = rng.uniform(0.40, 0.46)
    n_spots = int(rng.integers(14, 41))
    spots = np.zeros((n_spots, 6))
    for i in range(n_spots):
        radius = float(np.exp(rng.uniform(np.log(MIN_SPOT_RADIUS), np.log(MAX_SPOT_RADIUS))))
        # rejection-sample a center keeping the whole disc inside the outline
        body_len = 2.0 * ry
        while True:
            ang = rng.uniform(0, 2 * np.pi)
            rad = np.sqrt(rng.uniform(0, 1.0))
            margin = radius * body_len
            px = cx + rad * (rx - margin) * np.cos(ang)
            py = cy + rad * (ry - margin) * np.sin(ang)
            u = (px - cx) / rx
            v = (py - cy) / ry
            if u * u + v * v <= (1.0 - margin / min(rx, ry)) ** 2:
                break
        spots[i] = (
            px, py, radius, rng.uniform(0.65, 0.95),
            rng.uniform(0.55, 1.0), rng.uniform(0.0, np.pi),
        )
    return IdentityPattern(
        identity_id=identity_id or f"id{seed:04d}",
        spots=spots,
        outline=(cx, cy, float(rx), float(ry)),
        texture_seed=int(rng.integers(0, 2**31 - 1)),
    )


_CANONICAL_CACHE: dict[tuple[str, int, int], tuple[np.ndarray, np.ndarray]] = {}
_CANONICAL_CACHE_LIMIT = 8


def _canonical_images(pattern: IdentityPattern, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Rasterize the canonical pattern and body mask at the given canvas size.

    Cached per (identity, texture seed, size): one identity renders many
    captures, and the canonical frame is shared by all of them.
    """
    key = (pattern.identity_id, pattern.texture_seed, size)
    hit = _CANONICAL_CACHE.get(key)
    if hit is not None:
        return hit
    result = _rasterize_canonical(pattern, size)
    if len(_CANONICAL_CACHE) >= _CANONICAL_CACHE_LIMIT:
        _CANONICAL_CACHE.pop(next(iter(_CANONICAL_CACHE)))
    _CANONICAL_CACHE[key] = result
    return result


def _rasterize_canonical(pattern: IdentityPattern, size: int) -> tuple[np.ndarray, np.ndarray]:
    cx, cy, rx, ry = pattern.outline
    ys, xs = np.mgrid[0:size, 0:size]
    xu = (xs + 0.5) / size
    yu = (ys + 0.5) / size
    ell = ((xu - cx) / rx) ** 2 + ((yu - cy) / ry) ** 2
    body = ell <= 1.0
    # dark belly with a faint edge gradient plus identity-stable two-scale
    # micro-texture; the texture warps with the body, so it helps matching
    img = np.where(body, 0.22 + 0.05 * (1.0 - ell), 0.0)
    trng = _rng(pattern.texture_seed, 0x7E47)
    fine = gaussian_filter(trng.standard_normal((size, size)), 0.9)
    coarse = gaussian_filter(trng.standard_normal((size, size)), 2.5)
    texture = 0.6 * fine / max(float(fine.std()), 1e-9) \
        + 0.5 * coarse / max(float(coarse.std()), 1e-9)
    img = img + np.where(body, 0.10 * texture, 0.0)
    body_len_px = pattern.body_length * size
    for sx, sy, radius, intensity, aspect, theta in pattern.spots:
        r_px = radius * body_len_px
        pad = int(r_px / max(aspect, 0.5)) + 3
        x0 = max(int(sx * size) - pad, 0)
        x1 = min(int(sx * size) + pad + 1, size)
        y0 = max(int(sy * size) - pad, 0)
        y1 = min(int(sy * size) + pad + 1, size)
        wy, wx = np.mgrid[y0:y1, x0:x1]
        dx = wx + 0.5 - sx * size
        dy = wy + 0.5 - sy * size
        cos_t, sin_t = np.cos(theta), np.sin(theta)
        u = dx * cos_t + dy * sin_t
        v = (-dx * sin_t + dy * cos_t) / aspect
        d = np.sqrt(u * u + v * v)
        coverage = np.clip(r_px - d + 0.5, 0.0, 1.0)
        core = 1.0 - 0.25 * np.clip(d / max(r_px, 1e-6), 0.0, 1.0)
        window = img[y0:y1, x0:x1]
        img[y0:y1, x0:x1] = window + (intensity * core - window) * coverage
    return np.clip(img, 0.0, 1.0).astype(np.float32), body


class CorrespondenceMap:
    """Ground-truth mapping between the canonical frame and a rendered capture."""

    def __init__(self, inverse_similarity, forward_similarity, disp_x, disp_y, size):
        self._inv_sim = inverse_similarity     # rendered -> pre-warp canonical part
        self._fwd_sim = forward_similarity
        self._disp_x = disp_x                  # displacement field sampled in rendered frame
        self._disp_y = disp_y
        self.size = size

    def to_canonical(self, points: np.ndarray) -> np.ndarray:
        """Exact inverse warp: rendered pixel coords -> canonical pixel coords."""
        pts = np.asarray(points, dtype=np.float64)
        dx = sample_bilinear(self._disp_x, pts[:, 0], pts[:, 1])
        dy = sample_bilinear(self._disp_y, pts[:, 0], pts[:, 1])
        base = self._inv_sim(pts)
        return base + np.column_stack([dx, dy])

    def to_rendered(self, points: np.ndarray, tol: float = 0.05, max_iter: int = 60) -> np.ndarray:
        """Forward warp by fixed-point inversion of the analytic inverse map."""
        c = np.asarray(points, dtype=np.float64)
        q = self._fwd_sim(c)
        for _ in range(max_iter):
            dx = sample_bilinear(self._disp_x, q[:, 0], q[:, 1])
            dy = sample_bilinear(self._disp_y, q[:, 0], q[:, 1])
            q_next = self._fwd_sim(c - np.column_stack([dx, dy]))
            step = np.abs(q_next - q).max() if q.size else 0.0
            q = q_next
            if step < tol:
                break
        return q


def _smooth_field(rng: np.random.Generator, size: int, grid: int = 6) -> np.ndarray:
    """C1-smooth random field with unit std: coarse grid, upsample, filter."""
    coarse = rng.standard_normal((grid, grid))
    ys = np.linspace(0, grid - 1, size)
    xs = np.linspace(0, grid - 1, size)
    gx, gy = np.meshgrid(xs, ys)
    field = sample_bilinear(coarse, gx, gy)
    field = gaussian_filter(field, size / (3.0 * grid))
    return field / max(float(field.std()), 1e-9)


def render_capture(
    pattern: IdentityPattern,
    session: SessionParams,
    seed: int,
    size: int = 384,
    image_id: Optional[str] = None,
    capture_date: Optional[datetime.date] = None,
) -> tuple[CaptureImage, CorrespondenceMap]:
    """Render one capture of one identity under one session's conditions."""
    if size < 128:
        raise ValidationError(f"render size must be >= 128, got {size}")
    rng = _rng(seed, 0xCA97)
    canonical, body = _canonical_images(pattern, size)

    alpha = rng.uniform(-session.rotation_jitter, session.rotation_jitter)
    scale = 1.0 + rng.uniform(-session.scale_jitter, session.scale_jitter)
    center = np.array([size / 2.0, size / 2.0])
    cos_a, sin_a = np.cos(alpha), np.sin(alpha)
    fwd_mat = scale * np.array([[cos_a, -sin_a], [sin_a, cos_a]])
    inv_mat = np.linalg.inv(fwd_mat)

    def fwd_sim(pts: np.ndarray) -> np.ndarray:
        return (pts - center) @ fwd_mat.T + center

    def inv_sim(pts: np.ndarray) -> np.ndarray:
        return (pts - center) @ inv_mat.T + center

    amp_px = session.deformation_amplitude * pattern.body_length * size
    if amp_px > 0:
        disp_x = (_smooth_field(rng, size) * amp_px).astype(np.float64)
        disp_y = (_smooth_field(rng, size) * amp_px).astype(np.float64)
    else:
        rng.standard_normal((6, 6))  # keep the stream aligned across amplitudes
        rng.standard_normal((6, 6))
        disp_x = np.zeros((size, size))
        disp_y = np.zeros((size, size))

    ys, xs = np.mgrid[0:size, 0:size]
    grid = np.column_stack([xs.ravel(), ys.ravel()]).astype(np.float64)
    src = inv_sim(grid)
    src[:, 0] += disp_x.ravel()
    src[:, 1] += disp_y.ravel()
    warped = sample_bilinear(canonical.astype(np.float64), src[:, 0], src[:, 1]).reshape(size, size)
    mask = sample_bilinear(body.astype(np.float64), src[:, 0], src[:, 1]).reshape(size, size) >= 0.5

    warped = warped * session.illumination_gain + session.illumination_bias

    bg_rng = _rng(session.background_seed, 0xBA60)
    background = 0.45 + 0.12 * gaussian_filter(bg_rng.standard_normal((size, size)), 6.0) \
        + 0.05 * gaussian_filter(bg_rng.standard_normal((size, size)), 1.5)
    composed = np.where(mask, warped, background)
    if session.noise_sigma > 0:
        composed = composed + rng.normal(0.0, session.noise_sigma, composed.shape)
    raster = ImageRaster(np.clip(composed, 0.0, 1.0).astype(np.float32))

    capture = CaptureImage(
        image_id=image_id or f"{pattern.identity_id}_r{seed}",
        capture_date=capture_date or BASE_DATE,
        raster=raster,
        identity_id=pattern.identity_id,
        rotation_quarter_turns=0,
        mask=mask,
    )
    corr = CorrespondenceMap(inv_sim, fwd_sim, disp_x, disp_y, size)
    return capture, corr


def derive_session(template: SessionParams, base_seed: int, session_index: int) -> SessionParams:
    """Concrete per-session conditions: vary illumination and background."""
    rng = _rng(base_seed, 0x5E55, session_index)
    return replace(
        template,
        illumination_gain=template.illumination_gain * float(rng.uniform(0.92, 1.08)),
        illumination_bias=template.illumination_bias + float(rng.uniform(-0.02, 0.02)),
        background_seed=int(rng.integers(0, 2**31 - 1)),
    )


def generate_dataset(
    n_identities: int,
    sessions_per_identity: int,
    images_per_session: int,
    base_seed: int,
    out_dir: str | Path,
    session_params: SessionParams = SessionParams(),
    size: int = 384,
) -> Path:
    """Write images, masks, and a manifest; returns the manifest path.

    Dates are one per session (shared across identities, like survey days),
    so with >= 2 sessions every identity is multi-date.
    """
    if min(n_identities, sessions_per_identity, images_per_session) < 1:
        raise ValidationError("all dataset counts must be >= 1")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    sessions = [
        derive_session(session_params, base_seed, s) for s in range(sessions_per_identity)
    ]
    rows = []
    for i in range(n_identities):
        identity_id = f"id{i:03d}"
        pattern_seed = int(_rng(base_seed, 0x1DE7, i).integers(0, 2**62))
        pattern = generate_identity(pattern_seed, identity_id)
        for s, session in enumerate(sessions):
            date = BASE_DATE + datetime.timedelta(days=7 * s)
            for j in range(images_per_session):
                image_id = f"{identity_id}_s{s}_{j}"
                capture_seed = int(_rng(base_seed, 0xCAF7, i, s, j).integers(0, 2**62))
                capture, _ = render_capture(
                    pattern, session, capture_seed, size=size,
                    image_id=image_id, capture_date=date,
                )
                image_rel = f"images/{image_id}.png"
                mask_rel = f"masks/{image_id}.png"
                save_image(capture.raster, out / image_rel)
                save_mask(capture.mask, out / mask_rel)
                rows.append((image_rel, mask_rel, identity_id, date.isoformat(), 0))
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        writer.writerows(rows)
    return manifest
