"""Retrieval evaluation: global ranking, transformer reranking, and metrics.

An index maps image ids to instance labels, pooled global descriptors, and
feature-file references.  Initial ranking is cosine similarity over global
descriptors; reranking rescores the head of a ranked list with the match
head of a trained model.  Metrics are recall at k, mean average precision
(no interpolation), precision/recall points for PR curves, and a per-bin
recall breakdown over pairwise overlap scores.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Mapping, Sequence, Set
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import ManifestIndex, read_tensor
from .errors import EmptyQuerySet, MissingFeatures, NoPositives, ShapeMismatch, UnknownQuery
from .reranker import RerankerParams, match_logit

__all__ = [
    "IndexEntry",
    "OverlapBreakdown",
    "RankedList",
    "RetrievalIndex",
    "average_precision",
    "global_descriptor",
    "mean_average_precision",
    "overlap_breakdown",
    "pr_points",
    "rank_by_global",
    "recall_at_k",
    "rerank_topk",
    "run_retrieval",
]


def global_descriptor(features: np.ndarray) -> np.ndarray:
    """Arithmetic mean over the grid cells of an (n_cells, m) feature grid."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ShapeMismatch(f"feature grid must be 2-d, got shape {features.shape}")
    return features.mean(axis=0)


@dataclass(frozen=True)
class IndexEntry:
    """One database image: label, pooled descriptor, optional file-backed features."""

    instance_id: str
    descriptor: np.ndarray
    feature_path: Path | None = None
    overlaps: Mapping[str, float] | None = None

    def __post_init__(self):
        desc = np.asarray(self.descriptor, dtype=np.float64)
        if desc.ndim != 1:
            raise ShapeMismatch(f"descriptor must be 1-d, got shape {desc.shape}")
        if not np.isfinite(desc).all():
            raise ValueError("descriptor has non-finite entries")
        desc.setflags(write=False)
        object.__setattr__(self, "descriptor", desc)


@dataclass(frozen=True)
class RetrievalIndex:
    """Read-only image database; safe to share across evaluation threads."""

    entries: dict[str, IndexEntry]

    def __post_init__(self):
        dims = {e.descriptor.shape[0] for e in self.entries.values()}
        if len(dims) > 1:
            raise ShapeMismatch(f"descriptor lengths differ across entries: {sorted(dims)}")

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(self.entries)

    def positives(self, query_id: str) -> frozenset[str]:
        """Other images of the query's instance."""
        if query_id not in self.entries:
            raise UnknownQuery(f"unknown image id {query_id!r}")
        label = self.entries[query_id].instance_id
        return frozenset(
            i for i, e in self.entries.items() if e.instance_id == label and i != query_id
        )

    def features(self, image_id: str) -> np.ndarray:
        """Load the (n_cells, m) feature grid backing an entry."""
        if image_id not in self.entries:
            raise UnknownQuery(f"unknown image id {image_id!r}")
        path = self.entries[image_id].feature_path
        if path is None:
            raise MissingFeatures(f"no feature file recorded for {image_id!r}")
        try:
            grid = read_tensor(path)
        except OSError as err:
            raise MissingFeatures(f"cannot read features for {image_id!r}: {err}") from err
        return np.asarray(grid, dtype=np.float64)

    @classmethod
    def from_manifest(cls, manifest: ManifestIndex, split: str | None = None) -> "RetrievalIndex":
        """Pool every referenced feature grid into an in-memory index."""
        entries: dict[str, IndexEntry] = {}
        for record in manifest.records:
            if split is not None and record.split != split:
                continue
            path = manifest.resolve(record.feature_path)
            entries[record.image_id] = IndexEntry(
                instance_id=record.instance_id,
                descriptor=global_descriptor(read_tensor(path)),
                feature_path=path,
                overlaps=record.overlaps,
            )
        return cls(entries=entries)


@dataclass(frozen=True)
class RankedList:
    """Ordered retrieval result for one query; the query never lists itself."""

    query_id: str
    ids: tuple[str, ...]
    scores: tuple[float, ...] = field(repr=False)

    def __post_init__(self):
        if len(self.ids) != len(self.scores):
            raise ShapeMismatch("ids and scores differ in length")
        if self.query_id in self.ids:
            raise ValueError("query id appears in its own ranking")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("duplicate ids in ranking")
        if not all(math.isfinite(s) for s in self.scores):
            raise ValueError("non-finite ranking score")

    @classmethod
    def from_scores(
        cls, query_id: str, ids: Sequence[str], scores: Sequence[float]
    ) -> "RankedList":
        """Sort under (score descending, id ascending); insertion-order free."""
        order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
        return cls(
            query_id=query_id,
            ids=tuple(ids[i] for i in order),
            scores=tuple(float(scores[i]) for i in order),
        )


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    denom = float(np.linalg.norm(a) * np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(a @ b) / denom


def rank_by_global(index: RetrievalIndex, query_id: str) -> RankedList:
    """Cosine-similarity ranking of every other image against the query."""
    if query_id not in index.entries:
        raise UnknownQuery(f"unknown query id {query_id!r}")
    q = index.entries[query_id].descriptor
    ids = [i for i in index.entries if i != query_id]
    scores = [_cosine(q, index.entries[i].descriptor) for i in ids]
    return RankedList.from_scores(query_id, ids, scores)


Scorer = Callable[[str, str], float]


def rerank_topk(
    ranked: RankedList,
    k: int,
    model: RerankerParams | Scorer,
    index: RetrievalIndex,
) -> RankedList:
    """Reorder the first min(k, len) entries by the model's match logit.

    The head is permuted by descending logit with a stable sort, so entries
    the model cannot separate keep their incoming order; entries carry their
    original scores, the tail is untouched, and the length never changes.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    head = list(ranked.ids[: min(k, len(ranked.ids))])
    if not head:
        return ranked
    if callable(model):
        logits = [float(model(ranked.query_id, i)) for i in head]
    else:
        query_grid = index.features(ranked.query_id)
        logits = [float(match_logit(model, query_grid, index.features(i))) for i in head]
    order = sorted(range(len(head)), key=lambda i: -logits[i])
    ids = tuple(head[i] for i in order) + ranked.ids[len(head) :]
    scores = tuple(ranked.scores[i] for i in order) + ranked.scores[len(head) :]
    return RankedList(query_id=ranked.query_id, ids=ids, scores=scores)


def run_retrieval(
    index: RetrievalIndex,
    model: RerankerParams | Scorer | None = None,
    k_rerank: int = 10,
    threads: int = 1,
) -> dict[str, RankedList]:
    """Rank every image against the rest; optionally rerank each head.

    Results are keyed and ordered by ascending query id regardless of the
    worker count, so parallel evaluation merges deterministically.
    """
    queries = sorted(index.entries)

    def one(query_id: str) -> RankedList:
        ranked = rank_by_global(index, query_id)
        if model is not None:
            ranked = rerank_topk(ranked, k_rerank, model, index)
        return ranked

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, queries))
    else:
        results = [one(q) for q in queries]
    return {q: r for q, r in zip(queries, results)}


def recall_at_k(
    rankings: Sequence[RankedList],
    positives: Mapping[str, Set[str]],
    k: int,
) -> float:
    """Fraction of queries with at least one positive in the top k."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not rankings:
        raise EmptyQuerySet("no queries to evaluate")
    hits = 0
    for ranked in rankings:
        pos = positives.get(ranked.query_id, frozenset())
        if any(i in pos for i in ranked.ids[:k]):
            hits += 1
    return hits / len(rankings)


def _hit_ranks(ranked: RankedList, pos: Set[str]) -> list[int]:
    return [r for r, i in enumerate(ranked.ids, start=1) if i in pos]


def average_precision(ranked: RankedList, pos: Set[str]) -> float:
    """Mean over retrieved positives of precision at each positive's rank."""
    ranks = _hit_ranks(ranked, pos)
    if not ranks:
        raise NoPositives(f"query {ranked.query_id!r} has no retrievable positives")
    return sum(j / r for j, r in enumerate(ranks, start=1)) / len(ranks)


def mean_average_precision(
    rankings: Sequence[RankedList],
    positives: Mapping[str, Set[str]],
) -> float:
    if not rankings:
        raise EmptyQuerySet("no queries to evaluate")
    total = 0.0
    for ranked in rankings:
        total += average_precision(ranked, positives.get(ranked.query_id, frozenset()))
    return total / len(rankings)


def pr_points(ranked: RankedList, pos: Set[str]) -> list[tuple[float, float]]:
    """(recall, precision) at each retrieved positive, in rank order."""
    ranks = _hit_ranks(ranked, pos)
    return [(j / len(ranks), j / r) for j, r in enumerate(ranks, start=1)]


@dataclass(frozen=True)
class OverlapBreakdown:
    """Per-bin recall at 1 over the range of per-query mean positive overlap."""

    low: float
    high: float
    counts: tuple[int, ...]
    recalls: tuple[float, ...]
    excluded: int

    @property
    def bins(self) -> int:
        return len(self.counts)

    @property
    def edges(self) -> tuple[float, ...]:
        width = (self.high - self.low) / self.bins
        return tuple(self.low + width * i for i in range(self.bins + 1))


def overlap_breakdown(
    rankings: Sequence[RankedList],
    positives: Mapping[str, Set[str]],
    overlaps: Mapping[str, Mapping[str, float]],
    bins: int,
    value_range: tuple[float, float],
) -> OverlapBreakdown:
    """Bin queries by mean positive-pair overlap and report recall at 1 per bin.

    Bins are half-open with the last bin closed at the upper edge.  Queries
    whose mean overlap falls outside the range, or that have no recorded
    overlap with any positive, are excluded and counted.
    """
    low, high = float(value_range[0]), float(value_range[1])
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    if not low < high:
        raise ValueError(f"range low must be below high, got ({low}, {high})")
    width = (high - low) / bins
    grouped: list[list[RankedList]] = [[] for _ in range(bins)]
    excluded = 0
    for ranked in rankings:
        pos = positives.get(ranked.query_id, frozenset())
        scores = overlaps.get(ranked.query_id, {})
        values = [scores[p] for p in sorted(pos) if p in scores]
        if not values:
            excluded += 1
            continue
        mean_os = sum(values) / len(values)
        if mean_os < low or mean_os > high:
            excluded += 1
            continue
        idx = min(int((mean_os - low) / width), bins - 1)
        grouped[idx].append(ranked)
    recalls = tuple(
        recall_at_k(group, positives, 1) if group else math.nan for group in grouped
    )
    return OverlapBreakdown(
        low=low,
        high=high,
        counts=tuple(len(g) for g in grouped),
        recalls=recalls,
        excluded=excluded,
    )
