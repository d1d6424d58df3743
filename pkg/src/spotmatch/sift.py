"""Scale-invariant keypoint detection and 128-d description, pure numpy.

Classical recipe: Gaussian scale-space pyramid over a 2x-upsampled base image,
difference-of-Gaussians extrema with iterative subpixel refinement and edge
rejection, 36-bin gradient-histogram orientation assignment, and a 4x4 spatial
x 8 orientation gradient descriptor, L2-normalized with 0.2 clamping then
renormalized.  Keypoint coordinates and scales are reported in input-image
units.

Everything is vectorized and free of randomness, so identical input and
configuration give bit-identical output.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import gaussian_filter, maximum_filter, minimum_filter

SIGMA0 = 1.6          # blur of the first pyramid level
ASSUMED_BLUR = 0.5    # blur assumed present in the input
BORDER = 5            # image border excluded from detection
MAX_REFINE_STEPS = 5

ORI_BINS = 36
ORI_SIGMA_FACTOR = 1.5
ORI_RADIUS_FACTOR = 3.0   # window radius = 3 * (1.5 * sigma)
ORI_PEAK_RATIO = 0.8

DESC_WIDTH = 4
DESC_ORI_BINS = 8
DESC_SCALE_FACTOR = 3.0
DESC_CLAMP = 0.2
DESC_DIM = DESC_WIDTH * DESC_WIDTH * DESC_ORI_BINS

# Scatter-add work arrays are processed in chunks capped at this many entries.
_CHUNK_ENTRIES = 4_000_000


def _upsample_double(gray: np.ndarray) -> np.ndarray:
    """Bilinear 2x upsampling with half-pixel centers."""
    h, w = gray.shape
    ys = (np.arange(2 * h, dtype=np.float64) + 0.5) * 0.5 - 0.5
    xs = (np.arange(2 * w, dtype=np.float64) + 0.5) * 0.5 - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0).astype(np.float32)[:, None]
    fx = (xs - x0).astype(np.float32)[None, :]
    top = gray[y0][:, x0] * (1 - fx) + gray[y0][:, x1] * fx
    bot = gray[y1][:, x0] * (1 - fx) + gray[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def build_pyramid(gray: np.ndarray, n_octaves: int, scales: int) -> list[np.ndarray]:
    """Gaussian pyramid over the doubled base: (scales+3, h, w) stacks."""
    n_levels = scales + 3
    k = 2.0 ** (1.0 / scales)
    sigmas = [SIGMA0 * k**i for i in range(n_levels)]
    increments = [
        math.sqrt(max(sigmas[i] ** 2 - sigmas[i - 1] ** 2, 1e-6)) for i in range(1, n_levels)
    ]
    doubled = _upsample_double(gray.astype(np.float32))
    base = gaussian_filter(
        doubled, math.sqrt(max(SIGMA0**2 - (2 * ASSUMED_BLUR) ** 2, 0.01)), mode="reflect"
    )
    octaves: list[np.ndarray] = []
    for _ in range(n_octaves):
        h, w = base.shape
        if min(h, w) < 2 * BORDER + 6:
            break
        levels = [base]
        for inc in increments:
            levels.append(gaussian_filter(levels[-1], inc, mode="reflect"))
        octaves.append(np.stack(levels))
        base = levels[scales][::2, ::2].copy()
    return octaves


def _dog_stack(octave: np.ndarray) -> np.ndarray:
    return octave[1:] - octave[:-1]


def _extrema_candidates(dog: np.ndarray, prefilter: float) -> tuple[np.ndarray, ...]:
    """Integer (layer, y, x) positions of 26-neighborhood extrema."""
    footprint = np.ones((3, 3, 3), dtype=bool)
    is_max = (dog == maximum_filter(dog, footprint=footprint, mode="nearest")) & (dog > prefilter)
    is_min = (dog == minimum_filter(dog, footprint=footprint, mode="nearest")) & (dog < -prefilter)
    cand = is_max | is_min
    cand[0, :, :] = False
    cand[-1, :, :] = False
    cand[:, :BORDER, :] = False
    cand[:, -BORDER:, :] = False
    cand[:, :, :BORDER] = False
    cand[:, :, -BORDER:] = False
    return np.nonzero(cand)


def _hessian_2d(dog: np.ndarray, l: np.ndarray, y: np.ndarray, x: np.ndarray):
    v = dog[l, y, x]
    dxx = dog[l, y, x + 1] + dog[l, y, x - 1] - 2 * v
    dyy = dog[l, y + 1, x] + dog[l, y - 1, x] - 2 * v
    dxy = 0.25 * (
        dog[l, y + 1, x + 1] - dog[l, y + 1, x - 1] - dog[l, y - 1, x + 1] + dog[l, y - 1, x - 1]
    )
    return dxx, dyy, dxy


def _refine(
    dog: np.ndarray,
    layers: np.ndarray,
    ys: np.ndarray,
    xs: np.ndarray,
    scales: int,
    contrast_threshold: float,
    edge_threshold: float,
):
    """Iterative quadratic-fit refinement; returns accepted keypoint state."""
    n_layers, h, w = dog.shape
    dogf = dog.astype(np.float64)
    l = layers.astype(np.int64).copy()
    y = ys.astype(np.int64).copy()
    x = xs.astype(np.int64).copy()
    alive = np.ones(l.shape[0], dtype=bool)
    done = np.zeros_like(alive)
    offsets = np.zeros((l.shape[0], 3))  # dx, dy, dl
    contrast = np.zeros(l.shape[0])

    for _ in range(MAX_REFINE_STEPS):
        idx = np.nonzero(alive & ~done)[0]
        if idx.size == 0:
            break
        li, yi, xi = l[idx], y[idx], x[idx]
        v = dogf[li, yi, xi]
        gx = 0.5 * (dogf[li, yi, xi + 1] - dogf[li, yi, xi - 1])
        gy = 0.5 * (dogf[li, yi + 1, xi] - dogf[li, yi - 1, xi])
        gl = 0.5 * (dogf[li + 1, yi, xi] - dogf[li - 1, yi, xi])
        dxx = dogf[li, yi, xi + 1] + dogf[li, yi, xi - 1] - 2 * v
        dyy = dogf[li, yi + 1, xi] + dogf[li, yi - 1, xi] - 2 * v
        dll = dogf[li + 1, yi, xi] + dogf[li - 1, yi, xi] - 2 * v
        dxy = 0.25 * (
            dogf[li, yi + 1, xi + 1] - dogf[li, yi + 1, xi - 1]
            - dogf[li, yi - 1, xi + 1] + dogf[li, yi - 1, xi - 1]
        )
        dxl = 0.25 * (
            dogf[li + 1, yi, xi + 1] - dogf[li + 1, yi, xi - 1]
            - dogf[li - 1, yi, xi + 1] + dogf[li - 1, yi, xi - 1]
        )
        dyl = 0.25 * (
            dogf[li + 1, yi + 1, xi] - dogf[li + 1, yi - 1, xi]
            - dogf[li - 1, yi + 1, xi] + dogf[li - 1, yi - 1, xi]
        )
        # Cramer's rule for the 3x3 system H * delta = -g.
        det = (
            dxx * (dyy * dll - dyl * dyl)
            - dxy * (dxy * dll - dyl * dxl)
            + dxl * (dxy * dyl - dyy * dxl)
        )
        bad = np.abs(det) < 1e-30
        det_safe = np.where(bad, 1.0, det)
        bx, by, bl = -gx, -gy, -gl
        det_x = (
            bx * (dyy * dll - dyl * dyl)
            - dxy * (by * dll - dyl * bl)
            + dxl * (by * dyl - dyy * bl)
        )
        det_y = (
            dxx * (by * dll - bl * dyl)
            - bx * (dxy * dll - dyl * dxl)
            + dxl * (dxy * bl - by * dxl)
        )
        det_l = (
            dxx * (dyy * bl - by * dyl)
            - dxy * (dxy * bl - by * dxl)
            + bx * (dxy * dyl - dyy * dxl)
        )
        ox = det_x / det_safe
        oy = det_y / det_safe
        ol = det_l / det_safe
        alive[idx[bad]] = False

        conv = (np.abs(ox) < 0.5) & (np.abs(oy) < 0.5) & (np.abs(ol) < 0.5) & ~bad
        conv_idx = idx[conv]
        done[conv_idx] = True
        offsets[conv_idx, 0] = ox[conv]
        offsets[conv_idx, 1] = oy[conv]
        offsets[conv_idx, 2] = ol[conv]
        contrast[conv_idx] = v[conv] + 0.5 * (
            gx[conv] * ox[conv] + gy[conv] * oy[conv] + gl[conv] * ol[conv]
        )

        move = ~conv & ~bad
        move_idx = idx[move]
        x[move_idx] += np.rint(np.clip(ox[move], -5, 5)).astype(np.int64)
        y[move_idx] += np.rint(np.clip(oy[move], -5, 5)).astype(np.int64)
        l[move_idx] += np.rint(np.clip(ol[move], -5, 5)).astype(np.int64)
        oob = (
            (l[move_idx] < 1) | (l[move_idx] > n_layers - 2)
            | (y[move_idx] < BORDER) | (y[move_idx] > h - BORDER - 1)
            | (x[move_idx] < BORDER) | (x[move_idx] > w - BORDER - 1)
        )
        alive[move_idx[oob]] = False

    keep = alive & done
    keep &= np.abs(contrast) * scales >= contrast_threshold
    li, yi, xi = l[keep], y[keep], x[keep]
    dxx, dyy, dxy = _hessian_2d(dogf, li, yi, xi)
    tr = dxx + dyy
    det2 = dxx * dyy - dxy * dxy
    r = edge_threshold
    edge_ok = (det2 > 0) & (tr * tr * r < (r + 1) ** 2 * det2)
    sel = np.nonzero(keep)[0][edge_ok]
    return l[sel], y[sel], x[sel], offsets[sel], np.abs(contrast[sel])


def _gradients(level: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference magnitude and angle (radians in [0, 2pi)) per pixel."""
    img = level.astype(np.float32)
    dx = np.zeros_like(img)
    dy = np.zeros_like(img)
    dx[:, 1:-1] = 0.5 * (img[:, 2:] - img[:, :-2])
    dy[1:-1, :] = 0.5 * (img[2:, :] - img[:-2, :])
    mag = np.sqrt(dx * dx + dy * dy)
    ang = np.arctan2(dy, dx)
    ang = np.where(ang < 0, ang + 2 * np.pi, ang).astype(np.float32)
    return mag, ang


def _orientation_peaks(
    mag: np.ndarray, ang: np.ndarray, xs: np.ndarray, ys: np.ndarray, sigmas: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Per-keypoint dominant orientations; returns (keypoint index, angle) pairs."""
    h, w = mag.shape
    n = xs.shape[0]
    radii = np.maximum(np.rint(ORI_RADIUS_FACTOR * ORI_SIGMA_FACTOR * sigmas).astype(np.int64), 1)
    out_idx: list[np.ndarray] = []
    out_ang: list[np.ndarray] = []
    order = np.argsort(radii, kind="stable")
    start = 0
    while start < n:
        r0 = radii[order[start]]
        stop = start
        grid = (2 * r0 + 1) ** 2
        while stop < n and radii[order[stop]] <= 2 * r0 and (stop - start + 1) * (2 * radii[order[stop]] + 1) ** 2 < _CHUNK_ENTRIES:
            stop += 1
        sel = order[start:stop]
        start = stop
        rmax = int(radii[sel].max())
        off = np.arange(-rmax, rmax + 1)
        oy, ox = np.meshgrid(off, off, indexing="ij")
        oy = oy.ravel()[None, :]
        ox = ox.ravel()[None, :]
        cy = np.rint(ys[sel]).astype(np.int64)[:, None]
        cx = np.rint(xs[sel]).astype(np.int64)[:, None]
        py = cy + oy
        px = cx + ox
        rr = radii[sel][:, None]
        valid = (
            (np.abs(oy) <= rr) & (np.abs(ox) <= rr)
            & (py >= 1) & (py <= h - 2) & (px >= 1) & (px <= w - 2)
        )
        pyc = np.clip(py, 0, h - 1)
        pxc = np.clip(px, 0, w - 1)
        m = mag[pyc, pxc]
        a = ang[pyc, pxc]
        sw = 2.0 * (ORI_SIGMA_FACTOR * sigmas[sel][:, None]) ** 2
        wgt = np.exp(-(oy.astype(np.float64) ** 2 + ox.astype(np.float64) ** 2) / sw) * m * valid
        bins = np.rint(a * (ORI_BINS / (2 * np.pi))).astype(np.int64) % ORI_BINS
        k = sel.shape[0]
        rows = np.broadcast_to(np.arange(k)[:, None], bins.shape)
        flat = np.bincount(
            (rows * ORI_BINS + bins).ravel(), weights=wgt.ravel(), minlength=k * ORI_BINS
        )
        hist = flat.reshape(k, ORI_BINS)
        # circular smoothing with the binomial kernel (1,4,6,4,1)/16
        sm = (
            np.roll(hist, 2, axis=1) + np.roll(hist, -2, axis=1)
            + 4 * (np.roll(hist, 1, axis=1) + np.roll(hist, -1, axis=1))
            + 6 * hist
        ) / 16.0
        left = np.roll(sm, 1, axis=1)
        right = np.roll(sm, -1, axis=1)
        peak = (sm > left) & (sm > right) & (sm >= ORI_PEAK_RATIO * sm.max(axis=1, keepdims=True))
        peak &= sm > 0
        kk, bb = np.nonzero(peak)
        lv = left[kk, bb]
        rv = right[kk, bb]
        cv = sm[kk, bb]
        interp = 0.5 * (lv - rv) / (lv - 2 * cv + rv)
        angle = ((bb + interp) * (2 * np.pi / ORI_BINS)) % (2 * np.pi)
        out_idx.append(sel[kk])
        out_ang.append(angle)
    if not out_idx:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    return np.concatenate(out_idx), np.concatenate(out_ang)


def _descriptors(
    mag: np.ndarray,
    ang: np.ndarray,
    xs: np.ndarray,
    ys: np.ndarray,
    sigmas: np.ndarray,
    thetas: np.ndarray,
) -> np.ndarray:
    """4x4x8 oriented gradient histograms for keypoints on one pyramid level."""
    h, w = mag.shape
    n = xs.shape[0]
    d = DESC_WIDTH
    nb = DESC_ORI_BINS
    hist_width = DESC_SCALE_FACTOR * sigmas
    radii = np.rint(hist_width * math.sqrt(2) * (d + 1) * 0.5).astype(np.int64)
    radii = np.clip(radii, 1, int(math.hypot(h, w)))
    out = np.zeros((n, DESC_DIM), dtype=np.float32)
    order = np.argsort(radii, kind="stable")
    start = 0
    while start < n:
        stop = start
        while stop < n and (stop - start + 1) * (2 * radii[order[stop]] + 1) ** 2 < _CHUNK_ENTRIES:
            stop += 1
        stop = max(stop, start + 1)
        sel = order[start:stop]
        start = stop
        rmax = int(radii[sel].max())
        off = np.arange(-rmax, rmax + 1, dtype=np.float32)
        oy, ox = np.meshgrid(off, off, indexing="ij")
        oy = oy.ravel()[None, :]
        ox = ox.ravel()[None, :]
        cy = np.rint(ys[sel]).astype(np.int64)[:, None]
        cx = np.rint(xs[sel]).astype(np.int64)[:, None]
        py = cy + oy.astype(np.int64)
        px = cx + ox.astype(np.int64)
        rr = radii[sel][:, None].astype(np.float32)
        hw = hist_width[sel][:, None].astype(np.float32)
        th = thetas[sel][:, None].astype(np.float32)
        cos_t = np.cos(th) / hw
        sin_t = np.sin(th) / hw
        c_rot = ox * cos_t + oy * sin_t
        r_rot = -ox * sin_t + oy * cos_t
        rbin = r_rot + np.float32(d / 2 - 0.5)
        cbin = c_rot + np.float32(d / 2 - 0.5)
        valid = (
            (np.abs(oy) <= rr) & (np.abs(ox) <= rr)
            & (py >= 1) & (py <= h - 2) & (px >= 1) & (px <= w - 2)
            & (rbin > -1) & (rbin < d) & (cbin > -1) & (cbin < d)
        )
        pyc = np.clip(py, 0, h - 1)
        pxc = np.clip(px, 0, w - 1)
        m = mag[pyc, pxc]
        keep = valid & (m > 0)
        # transcendentals on the kept subset only
        k = sel.shape[0]
        rows = np.broadcast_to(np.arange(k)[:, None], keep.shape)
        rows_v = rows[keep]
        a_v = ang[pyc[keep], pxc[keep]]
        wgt_v = (
            np.exp((c_rot[keep] ** 2 + r_rot[keep] ** 2) * np.float32(-1.0 / (0.5 * d * d)))
            * m[keep]
        ).astype(np.float64)
        obin = (a_v - np.broadcast_to(th, keep.shape)[keep]) * np.float32(nb / (2 * np.pi))
        o0_v = np.floor(obin).astype(np.int64)
        fo_v = (obin - o0_v).astype(np.float64)
        o0_v %= nb
        rbin_v = rbin[keep]
        r0_v = np.floor(rbin_v).astype(np.int64)
        fr_v = (rbin_v - r0_v).astype(np.float64)
        cbin_v = cbin[keep]
        c0_v = np.floor(cbin_v).astype(np.int64)
        fc_v = (cbin_v - c0_v).astype(np.float64)
        hist = np.zeros(k * DESC_DIM)
        wgt_r = (wgt_v * (1.0 - fr_v), wgt_v * fr_v)
        wc_pair = (1.0 - fc_v, fc_v)
        wo_pair = (1.0 - fo_v, fo_v)
        for dr in (0, 1):
            rrow = r0_v + dr
            row_ok = (rrow >= 0) & (rrow < d)
            base_r = (rows_v * d + rrow) * d
            for dc in (0, 1):
                ccol = c0_v + dc
                col_ok = row_ok & (ccol >= 0) & (ccol < d)
                wrc = wgt_r[dr] * wc_pair[dc]
                base_rc = (base_r + ccol) * nb
                for do in (0, 1):
                    oo = (o0_v + do) % nb
                    hist += np.bincount(
                        (base_rc + oo)[col_ok],
                        weights=(wrc * wo_pair[do])[col_ok],
                        minlength=k * DESC_DIM,
                    )
        vecs = hist.reshape(k, DESC_DIM)
        norms = np.linalg.norm(vecs, axis=1, keepdims=True)
        norms = np.where(norms < 1e-12, 1.0, norms)
        vecs = np.minimum(vecs, DESC_CLAMP * norms)
        norms = np.linalg.norm(vecs, axis=1, keepdims=True)
        norms = np.where(norms < 1e-12, 1.0, norms)
        out[sel] = (vecs / norms).astype(np.float32)
    return out


def detect_and_describe_gray(
    gray: np.ndarray,
    n_octaves: int = 4,
    scales_per_octave: int = 3,
    contrast_threshold: float = 0.04,
    edge_threshold: float = 10.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Full detection + description on a (h, w) float array in [0, 1].

    Returns (keypoints (n, 5) float32 with columns x, y, scale, orientation,
    response, in input-image coordinates; descriptors (n, 128) float32),
    sorted by descending response with deterministic tie-breaking.
    """
    gray = np.asarray(gray, dtype=np.float32)
    pyramid = build_pyramid(gray, n_octaves, scales_per_octave)
    prefilter = 0.5 * contrast_threshold / scales_per_octave
    rows: list[np.ndarray] = []
    descs: list[np.ndarray] = []
    for octave_index, octave in enumerate(pyramid):
        dog = _dog_stack(octave)
        cand_l, cand_y, cand_x = _extrema_candidates(dog, prefilter)
        if cand_l.size == 0:
            continue
        l, y, x, offsets, response = _refine(
            dog, cand_l, cand_y, cand_x, scales_per_octave, contrast_threshold, edge_threshold
        )
        if l.size == 0:
            continue
        scale_oct = SIGMA0 * 2.0 ** ((l + offsets[:, 2]) / scales_per_octave)
        x_oct = x + offsets[:, 0]
        y_oct = y + offsets[:, 1]
        for layer in np.unique(l):
            in_layer = np.nonzero(l == layer)[0]
            mag, ang = _gradients(octave[layer])
            kp_idx, angles = _orientation_peaks(
                mag, ang, x_oct[in_layer], y_oct[in_layer], scale_oct[in_layer]
            )
            if kp_idx.size == 0:
                continue
            src = in_layer[kp_idx]
            desc = _descriptors(
                mag, ang, x_oct[src], y_oct[src], scale_oct[src], angles
            )
            # octave 0 sits on the doubled grid: input units are half steps
            factor = float(2**octave_index) * 0.5
            block = np.column_stack(
                [
                    x_oct[src] * factor,
                    y_oct[src] * factor,
                    scale_oct[src] * factor,
                    angles,
                    response[src],
                ]
            ).astype(np.float32)
            rows.append(block)
            descs.append(desc)
    if not rows:
        return np.zeros((0, 5), dtype=np.float32), np.zeros((0, DESC_DIM), dtype=np.float32)
    kp = np.concatenate(rows)
    desc = np.concatenate(descs)
    order = np.lexsort((kp[:, 3], kp[:, 2], kp[:, 1], kp[:, 0], -kp[:, 4]))
    return kp[order], desc[order]
