"""Identification orchestration: shortlist, re-rank, pool, open-set decision.

Two-stage: per query image, rank the gallery by embedding cosine similarity,
shortlist the top k, and re-rank the shortlist by local match similarity.
Candidates are pooled across the query images of one animal keeping each
gallery image's maximum similarity; the top pooled image decides the identity,
subject to the open-set threshold.

The exhaustive path matches every gallery image instead (no shortlist); with
embeddings supplied it also reports the full stage-1 ranking, so at k equal to
the gallery size the two paths produce identical output.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from spotmatch.matching import MatchConfig, match_pair, pair_seed
from spotmatch.model import (
    CaptureImage,
    Decision,
    FeatureSet,
    Gallery,
    GalleryEntry,
    RankedCandidates,
    SpotmatchError,
    ValidationError,
)
from spotmatch.retrieval import EmbeddingMatrix, cosine_matrix, topk_shortlist

FeatureProvider = Callable[[str], FeatureSet]
EmbeddingProvider = Callable[[str], np.ndarray]


@dataclass(frozen=True)
class PipelineConfig:
    """Identification knobs; match carries the stage-2 similarity mode."""

    k: int = 100
    open_set_threshold: float = 0.0
    stage2_enabled: bool = True
    root_seed: int = 0
    match: MatchConfig = field(default_factory=MatchConfig)

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValidationError(f"k must be >= 1, got {self.k}")
        if self.open_set_threshold < 0:
            raise ValidationError("open_set_threshold must be >= 0")


def open_set_decide(best: Optional[tuple[str, float]], threshold: float,
                    identity_of: Optional[Callable[[str], Optional[str]]] = None) -> Decision:
    """Accept the best match iff its score reaches the threshold."""
    if best is None:
        return Decision(kind="new_individual", score=0.0)
    image_id, score = best
    if score >= threshold:
        identity = identity_of(image_id) if identity_of else image_id
        if identity is None:
            raise SpotmatchError(f"gallery image {image_id} has no identity label")
        return Decision(kind="match", score=float(score), identity_id=identity)
    return Decision(kind="new_individual", score=float(score))


def _as_provider(source) -> Callable[[str], object]:
    if callable(source):
        return source
    return source.__getitem__


def _query_features(
    queries: Sequence[CaptureImage], provider: FeatureProvider
) -> dict[str, FeatureSet]:
    out = {}
    for capture in queries:
        try:
            out[capture.image_id] = provider(capture.image_id)
        except KeyError as exc:
            raise SpotmatchError(f"features unavailable for query {capture.image_id}") from exc
    return out


def _gallery_matrix(
    gallery: Gallery, provider: EmbeddingProvider
) -> tuple[list[GalleryEntry], EmbeddingMatrix]:
    entries = [gallery.entries[i] for i in gallery.image_ids]
    vectors = []
    for entry in entries:
        try:
            vectors.append(np.asarray(provider(entry.image_id), dtype=np.float64))
        except KeyError as exc:
            raise SpotmatchError(f"embedding unavailable for {entry.image_id}") from exc
    matrix = np.vstack(vectors) if vectors else np.zeros((0, 1))
    return entries, EmbeddingMatrix(tuple(e.image_id for e in entries), matrix, normalized=True)


def _stage2_scores(
    queries: Sequence[CaptureImage],
    candidates_per_query: Mapping[str, Sequence[str]],
    gallery: Gallery,
    config: PipelineConfig,
    query_features: Mapping[str, FeatureSet],
    gallery_features: FeatureProvider,
) -> dict[str, int]:
    """Pool match similarity across queries: per gallery image, the maximum."""
    pooled: dict[str, int] = {}
    for capture in queries:
        qfs = query_features[capture.image_id]
        for gallery_id in candidates_per_query[capture.image_id]:
            try:
                gfs = gallery_features(gallery_id)
            except KeyError as exc:
                raise SpotmatchError(f"features unavailable for {gallery_id}") from exc
            seed = pair_seed(config.root_seed, capture.image_id, gallery_id)
            result = match_pair(qfs, gfs, config.match, seed)
            prev = pooled.get(gallery_id)
            if prev is None or result.similarity > prev:
                pooled[gallery_id] = result.similarity
    return pooled


def _finish(
    queries: Sequence[CaptureImage],
    stage1: dict[str, list[tuple[str, float]]],
    pooled: dict[str, float],
    gallery: Gallery,
    config: PipelineConfig,
    integer_scores: bool,
) -> RankedCandidates:
    ranked = sorted(pooled.items(), key=lambda p: (-p[1], p[0]))
    if integer_scores:
        stage2 = tuple((image_id, int(score)) for image_id, score in ranked)
    else:
        stage2 = tuple((image_id, score) for image_id, score in ranked)
    best = (ranked[0][0], float(ranked[0][1])) if ranked else None
    decision = open_set_decide(best, config.open_set_threshold, gallery.identity_of)
    return RankedCandidates(
        query_image_ids=tuple(c.image_id for c in queries),
        stage1=tuple((qid, tuple(stage1[qid])) for qid in (c.image_id for c in queries)),
        stage2=stage2,
        decision=decision,
        threshold_used=float(config.open_set_threshold),
    )


def identify_two_stage(
    queries: Sequence[CaptureImage],
    gallery: Gallery,
    config: PipelineConfig,
    features,
    embeddings,
    exclude: Optional[Callable[[GalleryEntry], bool]] = None,
) -> RankedCandidates:
    """Identify one animal from its query images against the gallery.

    ``features`` and ``embeddings`` resolve image_id -> FeatureSet / unit
    vector for both query and gallery images (mapping or callable).
    """
    if not queries:
        raise SpotmatchError("queries must be non-empty")
    if not gallery.entries:
        return RankedCandidates(
            query_image_ids=tuple(c.image_id for c in queries),
            stage1=tuple((c.image_id, ()) for c in queries),
            stage2=(),
            decision=Decision(kind="new_individual", score=0.0),
            threshold_used=float(config.open_set_threshold),
        )
    feature_of = _as_provider(features)
    embedding_of = _as_provider(embeddings)
    entries, gallery_matrix = _gallery_matrix(gallery, embedding_of)

    stage1: dict[str, list[tuple[str, float]]] = {}
    candidates: dict[str, list[str]] = {}
    for capture in queries:
        try:
            qvec = np.asarray(embedding_of(capture.image_id), dtype=np.float64)
        except KeyError as exc:
            raise SpotmatchError(f"embedding unavailable for query {capture.image_id}") from exc
        qmat = EmbeddingMatrix((capture.image_id,), qvec[None, :], normalized=True)
        sims = cosine_matrix(qmat, gallery_matrix)[0]
        shortlist = topk_shortlist(sims, entries, config.k, exclude)
        stage1[capture.image_id] = shortlist
        candidates[capture.image_id] = [image_id for image_id, _ in shortlist]

    if not config.stage2_enabled:
        pooled_cos: dict[str, float] = {}
        for ranking in stage1.values():
            for image_id, score in ranking:
                if image_id not in pooled_cos or score > pooled_cos[image_id]:
                    pooled_cos[image_id] = score
        return _finish(queries, stage1, pooled_cos, gallery, config, integer_scores=False)

    query_features = _query_features(queries, feature_of)
    pooled = _stage2_scores(queries, candidates, gallery, config, query_features, feature_of)
    return _finish(queries, stage1, pooled, gallery, config, integer_scores=True)


def identify_local(
    queries: Sequence[CaptureImage],
    gallery: Gallery,
    config: PipelineConfig,
    features,
    embeddings=None,
    exclude: Optional[Callable[[GalleryEntry], bool]] = None,
) -> RankedCandidates:
    """Exhaustive local matching: every gallery image is a stage-2 candidate.

    When embeddings are supplied the full stage-1 ranking is reported as well,
    making the output identical to identify_two_stage at k = gallery size;
    without embeddings the stage-1 lists stay empty.
    """
    if not queries:
        raise SpotmatchError("queries must be non-empty")
    if not gallery.entries:
        return RankedCandidates(
            query_image_ids=tuple(c.image_id for c in queries),
            stage1=tuple((c.image_id, ()) for c in queries),
            stage2=(),
            decision=Decision(kind="new_individual", score=0.0),
            threshold_used=float(config.open_set_threshold),
        )
    feature_of = _as_provider(features)
    entries = [gallery.entries[i] for i in gallery.image_ids]
    kept = [e.image_id for e in entries if exclude is None or not exclude(e)]

    stage1: dict[str, list[tuple[str, float]]] = {c.image_id: [] for c in queries}
    if embeddings is not None:
        embedding_of = _as_provider(embeddings)
        _, gallery_matrix = _gallery_matrix(gallery, embedding_of)
        for capture in queries:
            qvec = np.asarray(embedding_of(capture.image_id), dtype=np.float64)
            qmat = EmbeddingMatrix((capture.image_id,), qvec[None, :], normalized=True)
            sims = cosine_matrix(qmat, gallery_matrix)[0]
            stage1[capture.image_id] = topk_shortlist(sims, entries, len(entries), exclude)

    query_features = _query_features(queries, feature_of)
    candidates = {c.image_id: kept for c in queries}
    pooled = _stage2_scores(queries, candidates, gallery, config, query_features, feature_of)
    return _finish(queries, stage1, pooled, gallery, config, integer_scores=True)
