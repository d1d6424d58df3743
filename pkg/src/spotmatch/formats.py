"""Binary file formats shared with external feature adapters.

All formats are little-endian with a 4-byte magic and a u16 version.

Feature file (.rif, magic "RIDF"):
    header  {magic 4s, version u16, id_len u16, image_id bytes, source u8,
             n u32, d u16, M u32}
    body    n keypoints {x f32, y f32, scale f32, orientation f32, response f32}
            then n*d descriptor f32s, row-major
    source: 0 = classical, 1 = imported; M = 0 encodes "unlimited".

Embedding file (.rie, magic "RIDE"):
    header  {magic 4s, version u16, count u32, D u32}
    body    count records {id_len u16, image_id bytes, D f32s}

Match file (.rim, magic "RIDM"):
    header  {magic 4s, version u16, id_len u16, image_id_a bytes,
             id_len u16, image_id_b bytes, n u32}
    body    n records {idx_a u32, idx_b u32, score f32,
                       x_a f32, y_a f32, x_b f32, y_b f32}
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Optional

import numpy as np

from spotmatch.model import Embedding, FeatureSet, MatchResult, SpotmatchError

FEATURE_MAGIC = b"RIDF"
EMBEDDING_MAGIC = b"RIDE"
MATCH_MAGIC = b"RIDM"
FORMAT_VERSION = 1

_SOURCE_CODES = {"classical": 0, "imported": 1}
_SOURCE_NAMES = {v: k for k, v in _SOURCE_CODES.items()}


class FormatError(SpotmatchError):
    """Bad magic, version, or malformed header."""


class TruncatedError(SpotmatchError):
    """Declared counts exceed the available payload."""


def _write_string(fh: BinaryIO, text: str) -> None:
    raw = text.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise FormatError(f"string too long to encode: {len(raw)} bytes")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise TruncatedError(f"truncated: expected {n} bytes for {what}, got {len(data)}")
    return data


def _read_string(fh: BinaryIO, what: str) -> str:
    (length,) = struct.unpack("<H", _read_exact(fh, 2, f"{what} length"))
    return _read_exact(fh, length, what).decode("utf-8")


def _check_header(fh: BinaryIO, magic: bytes) -> None:
    got = _read_exact(fh, 4, "magic")
    if got != magic:
        raise FormatError(f"format: bad magic {got!r}, expected {magic!r}")
    (version,) = struct.unpack("<H", _read_exact(fh, 2, "version"))
    if version != FORMAT_VERSION:
        raise FormatError(f"format: unsupported version {version}")


# ---------------------------------------------------------------------------
# Features


def write_features(features: FeatureSet, path: str | Path) -> None:
    n, d = features.descriptors.shape
    budget = features.max_keypoints if features.max_keypoints is not None else 0
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<H", FORMAT_VERSION))
        _write_string(fh, features.image_id)
        fh.write(struct.pack("<BIHI", _SOURCE_CODES[features.source], n, d, budget))
        fh.write(np.ascontiguousarray(features.keypoints, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(features.descriptors, dtype="<f4").tobytes())


def read_features(path: str | Path) -> FeatureSet:
    with open(path, "rb") as fh:
        _check_header(fh, FEATURE_MAGIC)
        image_id = _read_string(fh, "image_id")
        source_code, n, d, budget = struct.unpack("<BIHI", _read_exact(fh, 11, "feature header"))
        if source_code not in _SOURCE_NAMES:
            raise FormatError(f"format: unknown source code {source_code}")
        kp_bytes = _read_exact(fh, n * 5 * 4, "keypoints")
        desc_bytes = _read_exact(fh, n * d * 4, "descriptors")
        extra = fh.read(1)
    if extra:
        raise FormatError("format: trailing bytes after descriptor payload")
    keypoints = np.frombuffer(kp_bytes, dtype="<f4").reshape(n, 5)
    descriptors = np.frombuffer(desc_bytes, dtype="<f4").reshape(n, d)
    return FeatureSet(
        image_id=image_id,
        keypoints=keypoints,
        descriptors=descriptors,
        source=_SOURCE_NAMES[source_code],
        max_keypoints=budget or None,
    )


# ---------------------------------------------------------------------------
# Embeddings


def write_embeddings(embeddings: list[Embedding], path: str | Path) -> None:
    if not embeddings:
        dim = 0
    else:
        dim = embeddings[0].dim
        for emb in embeddings:
            if emb.dim != dim:
                raise FormatError(
                    f"format: embedding dimension {emb.dim} for {emb.image_id} != {dim}"
                )
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<H", FORMAT_VERSION))
        fh.write(struct.pack("<II", len(embeddings), dim))
        for emb in embeddings:
            _write_string(fh, emb.image_id)
            fh.write(np.ascontiguousarray(emb.vector, dtype="<f4").tobytes())


def read_embeddings(path: str | Path) -> list[Embedding]:
    out: list[Embedding] = []
    with open(path, "rb") as fh:
        _check_header(fh, EMBEDDING_MAGIC)
        count, dim = struct.unpack("<II", _read_exact(fh, 8, "embedding header"))
        for _ in range(count):
            image_id = _read_string(fh, "image_id")
            vec = np.frombuffer(_read_exact(fh, dim * 4, "vector"), dtype="<f4")
            out.append(Embedding(image_id=image_id, vector=vec, normalized=False))
        extra = fh.read(1)
    if extra:
        raise FormatError("format: trailing bytes after embedding payload")
    return out


# ---------------------------------------------------------------------------
# Matches


def write_matches(
    result: MatchResult,
    path: str | Path,
    coords_a: Optional[np.ndarray] = None,
    coords_b: Optional[np.ndarray] = None,
) -> None:
    """Write correspondences; coords default to zero when keypoints are unknown."""
    n = len(result.correspondences)
    if coords_a is None:
        coords_a = np.zeros((n, 2), dtype=np.float32)
    if coords_b is None:
        coords_b = np.zeros((n, 2), dtype=np.float32)
    with open(path, "wb") as fh:
        fh.write(MATCH_MAGIC)
        fh.write(struct.pack("<H", FORMAT_VERSION))
        _write_string(fh, result.image_a)
        _write_string(fh, result.image_b)
        fh.write(struct.pack("<I", n))
        for i, (ia, ib, score) in enumerate(result.correspondences):
            fh.write(
                struct.pack(
                    "<IIfffff",
                    ia,
                    ib,
                    score,
                    float(coords_a[i][0]),
                    float(coords_a[i][1]),
                    float(coords_b[i][0]),
                    float(coords_b[i][1]),
                )
            )


def read_matches(path: str | Path) -> tuple[MatchResult, np.ndarray, np.ndarray]:
    """Return (MatchResult, coords_a (n,2), coords_b (n,2))."""
    with open(path, "rb") as fh:
        _check_header(fh, MATCH_MAGIC)
        image_a = _read_string(fh, "image_id_a")
        image_b = _read_string(fh, "image_id_b")
        (n,) = struct.unpack("<I", _read_exact(fh, 4, "match count"))
        raw = np.frombuffer(_read_exact(fh, n * 28, "match records"), dtype="<u4").reshape(n, 7)
        extra = fh.read(1)
    if extra:
        raise FormatError("format: trailing bytes after match payload")
    floats = raw.view("<f4")
    correspondences = tuple(
        (int(raw[i, 0]), int(raw[i, 1]), float(floats[i, 2])) for i in range(n)
    )
    coords_a = floats[:, 3:5].astype(np.float32)
    coords_b = floats[:, 5:7].astype(np.float32)
    result = MatchResult(
        image_a=image_a,
        image_b=image_b,
        correspondences=correspondences,
        similarity=n,
        verified=False,
    )
    return result, coords_a, coords_b
