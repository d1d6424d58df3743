"""Closed- and open-set evaluation protocol, metrics, and calibration.

Protocol: identities seen on only one date are removed from the query pool;
every remaining image is a query in turn, and its references are all images
taken on a different date (same-date pairs are trivially easy and are
discarded).  Every query's identity therefore appears among its references:
closed-set identification.

Pair scores are computed once per unordered cross-date pair with a canonical
direction (lexicographically smaller image_id first); rankings at the image
and identity level, score histograms, the precision-recall sweep, and
threshold calibration all derive from that shared table.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from spotmatch.matching import MatchConfig, score_pairs
from spotmatch.model import FeatureSet, Gallery, SpotmatchError
from spotmatch.retrieval import EmbeddingMatrix, cosine_matrix

METRICS_COLUMNS = ["model", "k", "level", "accuracy", "n_queries"]
PR_COLUMNS = ["threshold", "precision", "recall", "TP", "FP", "FN"]
HISTOGRAM_COLUMNS = ["bin_left", "bin_right", "same_individual", "different_individual"]


class ProtocolError(SpotmatchError):
    """The dataset cannot support the evaluation protocol."""


class CalibrationError(SpotmatchError):
    """The requested operating point is not on the curve."""

    def __init__(self, message: str, frontier: Optional[tuple[float, float, float]] = None):
        super().__init__(message)
        self.frontier = frontier  # (threshold, precision, recall) closest to the target


@dataclass(frozen=True)
class ProtocolInstance:
    """Queries, per-query reference lists, and ground truth for one dataset."""

    queries: tuple[str, ...]
    references: Mapping[str, tuple[str, ...]]
    identity_of: Mapping[str, str]
    date_of: Mapping[str, object]


def build_protocol(dataset: Gallery) -> ProtocolInstance:
    """Construct the closed-set protocol from a labeled gallery."""
    identity_of = {}
    date_of = {}
    for image_id, entry in dataset.entries.items():
        if entry.identity_id is None:
            raise ProtocolError(f"image {image_id} has no identity label")
        identity_of[image_id] = entry.identity_id
        date_of[image_id] = entry.capture_date
    multi_date = {
        identity_id
        for identity_id in dataset.identities
        if len(dataset.dates_of(identity_id)) >= 2
    }
    if not multi_date:
        raise ProtocolError("no evaluable queries: every identity was seen on a single date")
    all_ids = sorted(dataset.entries)
    queries = tuple(i for i in all_ids if identity_of[i] in multi_date)
    references = {
        q: tuple(r for r in all_ids if date_of[r] != date_of[q]) for q in queries
    }
    return ProtocolInstance(
        queries=queries,
        references=references,
        identity_of=identity_of,
        date_of=date_of,
    )


def cross_date_pairs(protocol: ProtocolInstance) -> list[tuple[str, str]]:
    """All unordered cross-date pairs touched by the protocol, canonical order."""
    pairs = set()
    for q, refs in protocol.references.items():
        for r in refs:
            pairs.add((q, r) if q < r else (r, q))
    return sorted(pairs)


# ---------------------------------------------------------------------------
# Rankings and top-k accuracy


def rank_references(
    protocol: ProtocolInstance, scores: Mapping[tuple[str, str], float]
) -> dict[str, list[tuple[str, float]]]:
    """Per-query reference ranking from a canonical unordered-pair score table."""
    rankings = {}
    for q, refs in protocol.references.items():
        scored = []
        for r in refs:
            key = (q, r) if q < r else (r, q)
            scored.append((r, float(scores[key])))
        scored.sort(key=lambda p: (-p[1], p[0]))
        rankings[q] = scored
    return rankings


def topk_accuracy(
    rankings: Mapping[str, Sequence[tuple[str, float]]],
    identity_of: Mapping[str, str],
    k: int,
    level: str = "image",
) -> float:
    """Fraction of queries whose true identity appears in the top k.

    Image level: any of the k best reference images carries the identity.
    Identity level: the ranking is collapsed to distinct identities in order
    of first appearance before taking the top k.
    """
    if k < 1:
        raise SpotmatchError(f"k must be >= 1, got {k}")
    if level not in ("image", "identity"):
        raise SpotmatchError(f"unknown level {level!r}")
    if not rankings:
        raise SpotmatchError("rankings must be non-empty")
    hits = 0
    for query_id, ranking in rankings.items():
        truth = identity_of[query_id]
        ordered = sorted(ranking, key=lambda p: (-p[1], p[0]))
        if level == "image":
            top = ordered[:k]
            hits += any(identity_of[r] == truth for r, _ in top)
        else:
            seen: list[str] = []
            for r, _ in ordered:
                identity = identity_of[r]
                if identity not in seen:
                    seen.append(identity)
                if len(seen) >= k:
                    break
            hits += truth in seen
    return hits / len(rankings)


# ---------------------------------------------------------------------------
# Pair-level open-set statistics


def pair_labels(
    scores: Mapping[tuple[str, str], float], identity_of: Mapping[str, str]
) -> tuple[np.ndarray, np.ndarray]:
    """Score array and same-individual boolean labels, in sorted pair order."""
    keys = sorted(scores)
    values = np.array([scores[k] for k in keys], dtype=np.float64)
    labels = np.array([identity_of[a] == identity_of[b] for a, b in keys], dtype=bool)
    return values, labels


def score_histograms(
    scores: np.ndarray, labels: np.ndarray, bin_width: Optional[float] = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Same- and different-individual histograms over shared bin edges.

    Returns (same_counts, different_counts, edges).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape:
        raise SpotmatchError("scores and labels must align")
    lo = float(scores.min())
    hi = float(scores.max())
    if bin_width is None:
        bin_width = max((hi - lo) / 50.0, 1.0)
    n_bins = max(int(np.ceil((hi - lo) / bin_width)), 1)
    edges = lo + bin_width * np.arange(n_bins + 1)
    same, _ = np.histogram(scores[labels], bins=edges)
    diff, _ = np.histogram(scores[~labels], bins=edges)
    return same, diff, edges


@dataclass(frozen=True, eq=False)
class PRCurve:
    """Precision-recall sweep over the distinct observed scores."""

    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    positives_count: int
    negatives_count: int

    def rows(self) -> Iterable[tuple[float, float, float, int, int, int]]:
        for i in range(len(self.thresholds)):
            yield (
                float(self.thresholds[i]), float(self.precision[i]), float(self.recall[i]),
                int(self.tp[i]), int(self.fp[i]), int(self.fn[i]),
            )


def pr_curve(scores: np.ndarray, labels: np.ndarray) -> PRCurve:
    """Treat same-individual pairs as positives; predict positive iff score >= t.

    Thresholds are the distinct observed scores (exact curve, no binning).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape:
        raise SpotmatchError("scores and labels must align")
    positives = int(labels.sum())
    negatives = int((~labels).sum())
    if positives == 0 or negatives == 0:
        raise SpotmatchError("degenerate labels: need at least one positive and one negative")
    thresholds = np.unique(scores)  # ascending
    # Sort scores descending; at threshold t, predictions are scores >= t.
    order = np.argsort(-scores, kind="stable")
    sorted_labels = labels[order]
    cum_tp = np.cumsum(sorted_labels)
    sorted_scores = scores[order]
    # For each threshold, count predictions with score >= t.
    counts = len(scores) - np.searchsorted(-sorted_scores, -thresholds, side="left")
    tp = np.where(counts > 0, cum_tp[np.maximum(counts - 1, 0)], 0)
    fp = counts - tp
    fn = positives - tp
    precision = np.divide(tp, counts, out=np.ones_like(tp, dtype=np.float64), where=counts > 0)
    recall = tp / positives
    return PRCurve(
        thresholds=thresholds,
        precision=precision,
        recall=recall,
        tp=tp.astype(np.int64),
        fp=fp.astype(np.int64),
        fn=fn.astype(np.int64),
        positives_count=positives,
        negatives_count=negatives,
    )


def calibrate_threshold(
    curve: PRCurve, target_metric: str, target_value: float
) -> tuple[float, float, float]:
    """Pick the operating threshold for a recall or precision floor.

    Recall target: the largest threshold with recall >= target (maximizing
    precision subject to the floor).  Precision target: the smallest threshold
    with precision >= target (maximizing recall subject to the floor).
    Returns (threshold, achieved precision, achieved recall).
    """
    if target_metric not in ("recall", "precision"):
        raise SpotmatchError(f"unknown calibration target {target_metric!r}")
    if target_metric == "recall":
        feasible = np.nonzero(curve.recall >= target_value)[0]
    else:
        feasible = np.nonzero(curve.precision >= target_value)[0]
    if feasible.size == 0:
        best = int(np.argmax(curve.precision if target_metric == "precision" else curve.recall))
        frontier = (
            float(curve.thresholds[best]),
            float(curve.precision[best]),
            float(curve.recall[best]),
        )
        raise CalibrationError(
            f"target infeasible: no threshold reaches {target_metric} >= {target_value}; "
            f"frontier point threshold={frontier[0]:g} precision={frontier[1]:.4f} "
            f"recall={frontier[2]:.4f}",
            frontier=frontier,
        )
    # Thresholds ascend, recall descends: the largest feasible threshold for a
    # recall floor is the last feasible index; the smallest for precision the first.
    idx = int(feasible[-1]) if target_metric == "recall" else int(feasible[0])
    return (
        float(curve.thresholds[idx]),
        float(curve.precision[idx]),
        float(curve.recall[idx]),
    )


# ---------------------------------------------------------------------------
# Dataset split


def _round_half_away(x: float) -> int:
    return int(np.floor(x + 0.5)) if x >= 0 else -int(np.floor(-x + 0.5))


def split_identities(
    date_counts: Mapping[str, int], fraction: float, seed: int
) -> tuple[set[str], set[str]]:
    """Class-disjoint split stratified by distinct-date count.

    Within each group of identities sharing a recapture count, a seeded
    shuffle sends round(fraction * group size) identities to validation
    (round half away from zero); the rest train.
    """
    if not 0.0 < fraction < 1.0:
        raise SpotmatchError(f"fraction must lie in (0, 1), got {fraction}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x5B17])))
    groups: dict[int, list[str]] = {}
    for identity_id in sorted(date_counts):
        groups.setdefault(date_counts[identity_id], []).append(identity_id)
    train: set[str] = set()
    validation: set[str] = set()
    for count in sorted(groups):
        members = groups[count]
        take = _round_half_away(fraction * len(members))
        order = rng.permutation(len(members))
        chosen = {members[i] for i in order[:take]}
        validation |= chosen
        train |= set(members) - chosen
    return train, validation


# ---------------------------------------------------------------------------
# Runtime measurement


def measure_runtime(task: Callable[[], object]) -> tuple[float, object]:
    """Wall-clock a closure with a monotonic high-resolution clock.

    The bracket includes everything the closure does (model and data loading
    included), but not interpreter or import startup.  Returns (seconds,
    task result).
    """
    start = time.perf_counter()
    result = task()
    return time.perf_counter() - start, result


# ---------------------------------------------------------------------------
# Evaluation runs


@dataclass
class EvalRun:
    """One evaluation: rankings, pair scores, and metadata for CSV emission."""

    model: str
    rankings: dict[str, list[tuple[str, float]]]
    pair_scores: dict[tuple[str, str], float]
    protocol: ProtocolInstance
    elapsed_seconds: float


def evaluate_exhaustive(
    protocol: ProtocolInstance,
    features: Mapping[str, FeatureSet],
    match_config: MatchConfig,
    root_seed: int = 0,
    workers: int = 1,
    model: str = "classical_exhaustive",
) -> EvalRun:
    """Score every cross-date pair with the local matcher and rank references."""
    def run() -> dict[tuple[str, str], float]:
        pairs = cross_date_pairs(protocol)
        return {
            pair: float(s)
            for pair, s in score_pairs(pairs, features, match_config, root_seed, workers).items()
        }

    elapsed, scores = measure_runtime(run)
    rankings = rank_references(protocol, scores)
    return EvalRun(model, rankings, scores, protocol, elapsed)


def evaluate_two_stage(
    protocol: ProtocolInstance,
    features: Mapping[str, FeatureSet],
    embeddings: EmbeddingMatrix,
    k: int,
    match_config: MatchConfig,
    root_seed: int = 0,
    workers: int = 1,
    model: str = "two_stage",
) -> EvalRun:
    """Shortlist top-k references by cosine, then re-rank them locally.

    References outside a query's shortlist are not scored; rankings contain
    only the re-ranked shortlist (trailing references cannot win top-k at
    k <= shortlist size).
    """
    if k < 1:
        raise SpotmatchError(f"k must be >= 1, got {k}")
    index = {image_id: i for i, image_id in enumerate(embeddings.image_ids)}
    missing = [q for q in protocol.queries if q not in index]
    if missing:
        raise SpotmatchError(f"embeddings missing for {missing[:5]}")

    def run() -> tuple[dict, dict]:
        sims = cosine_matrix(embeddings, embeddings)
        shortlists = {}
        needed = set()
        for q in protocol.queries:
            refs = protocol.references[q]
            row = sims[index[q]]
            scored = sorted(
                ((r, float(row[index[r]])) for r in refs),
                key=lambda p: (-p[1], p[0]),
            )[:k]
            shortlists[q] = [r for r, _ in scored]
            for r in shortlists[q]:
                needed.add((q, r) if q < r else (r, q))
        pair_scores = {
            pair: float(s)
            for pair, s in score_pairs(
                sorted(needed), features, match_config, root_seed, workers
            ).items()
        }
        return shortlists, pair_scores

    elapsed, (shortlists, pair_scores) = measure_runtime(run)
    rankings = {}
    for q, shortlist in shortlists.items():
        scored = [
            (r, pair_scores[(q, r) if q < r else (r, q)]) for r in shortlist
        ]
        scored.sort(key=lambda p: (-p[1], p[0]))
        rankings[q] = scored
    return EvalRun(model, rankings, pair_scores, protocol, elapsed)


def metrics_rows(
    run: EvalRun, k_values: Sequence[int], levels: Sequence[str] = ("image", "identity")
) -> list[dict]:
    rows = []
    for level in levels:
        for k in k_values:
            rows.append(
                {
                    "model": run.model,
                    "k": k,
                    "level": level,
                    "accuracy": topk_accuracy(run.rankings, run.protocol.identity_of, k, level),
                    "n_queries": len(run.rankings),
                }
            )
    return rows


def write_metrics_csv(rows: Sequence[Mapping], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({c: row[c] for c in METRICS_COLUMNS})


def write_pr_csv(curve: PRCurve, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PR_COLUMNS)
        writer.writerows(curve.rows())


def write_histogram_csv(
    same: np.ndarray, diff: np.ndarray, edges: np.ndarray, path: str | Path
) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTOGRAM_COLUMNS)
        for i in range(len(same)):
            writer.writerow([edges[i], edges[i + 1], int(same[i]), int(diff[i])])


def write_pairs_csv(
    scores: Mapping[tuple[str, str], float],
    identity_of: Mapping[str, str],
    path: str | Path,
) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id_a", "image_id_b", "score", "same_individual"])
        for a, b in sorted(scores):
            writer.writerow([a, b, scores[(a, b)], int(identity_of[a] == identity_of[b])])


def read_pairs_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    scores = []
    labels = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            scores.append(float(row["score"]))
            labels.append(row["same_individual"] == "1")
    return np.asarray(scores, dtype=np.float64), np.asarray(labels, dtype=bool)
