"""Weak cluster labels: embed reports, run k-means, assign a cluster id.

The built-in embedding provider is TF-IDF over the training vocabulary;
externally computed report embeddings can be ingested from an NDJSON file
instead, so a stronger provider can be plugged in without touching the
clustering code.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, IngestionError
from .ioutil import read_ndjson, write_ndjson
from .text import Vocabulary

_SPECIAL_COUNT = 4


@dataclass
class EmbeddingMatrix:
    """Per-report embedding rows, aligned with the dataset's record order."""

    data: np.ndarray  # (rows, dim)
    provider_tag: str  # "tfidf" | "external"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ContractError(f"embedding matrix must be 2-D, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ContractError("embedding matrix contains non-finite values")

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


def tfidf_embed(corpus: Sequence[Sequence[str]], vocab: Vocabulary) -> EmbeddingMatrix:
    """TF-IDF rows over the non-special vocabulary, L2-normalized.

    tf is the raw in-document count, idf = ln((1+N)/(1+df)) + 1. Documents
    with no in-vocabulary token keep a zero row.
    """
    n_docs = len(corpus)
    dim = len(vocab) - _SPECIAL_COUNT
    counts = np.zeros((n_docs, dim), dtype=np.float64)
    for row, tokens in enumerate(corpus):
        for token in tokens:
            token_id = vocab.id_of(token)
            if token_id >= _SPECIAL_COUNT:
                counts[row, token_id - _SPECIAL_COUNT] += 1.0
    df = (counts > 0).sum(axis=0)
    idf = np.log((1.0 + n_docs) / (1.0 + df)) + 1.0
    mat = counts * idf
    norms = np.linalg.norm(mat, axis=1)
    nonzero = norms > 0
    mat[nonzero] /= norms[nonzero, None]
    return EmbeddingMatrix(data=mat, provider_tag="tfidf")


def save_embeddings(path: str, ids: Sequence[str], emb: EmbeddingMatrix) -> None:
    if len(ids) != emb.rows:
        raise ContractError(f"{len(ids)} ids vs {emb.rows} embedding rows")
    write_ndjson(path, [{"id": i, "vec": list(map(float, emb.data[r]))}
                        for r, i in enumerate(ids)])


def load_embeddings(path: str, ids: Sequence[str]) -> EmbeddingMatrix:
    """Read NDJSON {"id", "vec"} rows and align them to ``ids`` order."""
    by_id: dict[str, list[float]] = {}
    dim = None
    for lineno, row in enumerate(read_ndjson(path), start=1):
        if "id" not in row or "vec" not in row:
            raise IngestionError(f"line {lineno}: embedding row needs 'id' and 'vec'")
        vec = row["vec"]
        if dim is None:
            dim = len(vec)
        elif len(vec) != dim:
            raise IngestionError(
                f"line {lineno} (id {row['id']!r}): dim {len(vec)} != expected {dim}")
        arr = np.asarray(vec, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise IngestionError(f"line {lineno} (id {row['id']!r}): non-finite value")
        by_id[row["id"]] = arr
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise IngestionError(f"embedding file is missing report id {missing[0]!r}")
    data = np.stack([by_id[i] for i in ids])
    return EmbeddingMatrix(data=data, provider_tag="external")


@dataclass
class ClusterModel:
    """Fitted k-means: centroids, per-report labels, and the final inertia."""

    k: int
    centroids: np.ndarray  # (k, dim)
    labels: np.ndarray  # (rows,) ints in [0, k)
    inertia: float
    seed: int
    iterations_run: int

    def recompute_inertia(self, emb: EmbeddingMatrix) -> float:
        diffs = emb.data - self.centroids[self.labels]
        return float(np.sum(diffs * diffs))


def _squared_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # (n, k) matrix of squared euclidean distances, clamped at zero
    sq = (
        np.sum(points * points, axis=1)[:, None]
        - 2.0 * points @ centers.T
        + np.sum(centers * centers, axis=1)[None, :]
    )
    return np.maximum(sq, 0.0)


def _kmeanspp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    closest = _squared_distances(points, centers[:1]).min(axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total == 0.0:
            # all remaining mass at existing centers; pick uniformly
            centers[j] = points[rng.integers(n)]
        else:
            r = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(closest), r, side="right"))
            idx = min(idx, n - 1)
            centers[j] = points[idx]
        closest = np.minimum(closest, _squared_distances(points, centers[j:j + 1]).min(axis=1))
    return centers


def _repair_empty_clusters(labels: np.ndarray, point_cost: np.ndarray, k: int) -> None:
    """Give each empty cluster the costliest point from a cluster of size >= 2.

    By pigeonhole such a donor always exists; the stolen point is counted at
    cost zero (it will sit exactly on its new centroid after the update).
    """
    counts = np.bincount(labels, minlength=k)
    for cluster in range(k):
        if counts[cluster] > 0:
            continue
        eligible = counts[labels] >= 2
        thief = int(np.where(eligible, point_cost, -1.0).argmax())
        counts[labels[thief]] -= 1
        counts[cluster] += 1
        labels[thief] = cluster
        point_cost[thief] = 0.0


def kmeans(emb: EmbeddingMatrix, k: int, seed: int, max_iters: int = 100) -> ClusterModel:
    """Lloyd iterations from k-means++ seeding, deterministic given ``seed``.

    Runs until the assignment reaches a fixpoint or ``max_iters``. Empty
    clusters are repaired by stealing the point farthest from its assigned
    centroid. Inertia is asserted non-increasing across iterations.
    """
    points = emb.data
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ContractError(f"k must satisfy 1 <= k <= {n}, got {k}")
    if max_iters < 1:
        raise ContractError(f"max_iters must be >= 1, got {max_iters}")

    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_init(points, k, rng)
    labels = np.zeros(n, dtype=np.int64)
    previous_inertia = np.inf
    iterations = 0
    for _ in range(max_iters):
        iterations += 1
        sq = _squared_distances(points, centroids)
        new_labels = sq.argmin(axis=1)  # argmin takes the lowest index on ties
        point_cost = sq[np.arange(n), new_labels]
        _repair_empty_clusters(new_labels, point_cost, k)

        inertia = float(point_cost.sum())
        assert inertia <= previous_inertia + 1e-9 * max(1.0, abs(previous_inertia)), \
            "k-means inertia increased"
        previous_inertia = inertia

        converged = np.array_equal(new_labels, labels) and iterations > 1
        labels = new_labels
        for cluster in range(k):
            centroids[cluster] = points[labels == cluster].mean(axis=0)
        if converged:
            break

    # final assignment against the final centroids
    sq = _squared_distances(points, centroids)
    labels = sq.argmin(axis=1)
    point_cost = sq[np.arange(n), labels]
    _repair_empty_clusters(labels, point_cost, k)
    inertia = float(np.sum((points - centroids[labels]) ** 2))
    return ClusterModel(k=k, centroids=centroids, labels=labels,
                        inertia=inertia, seed=seed, iterations_run=iterations)


def predict(model: ClusterModel, emb: EmbeddingMatrix) -> np.ndarray:
    """Nearest-centroid labels for new points; ties go to the lower index."""
    if emb.dim != model.centroids.shape[1]:
        raise ContractError(
            f"embedding dim {emb.dim} != centroid dim {model.centroids.shape[1]}")
    return _squared_distances(emb.data, model.centroids).argmin(axis=1)


def assign_labels(model: ClusterModel, ids: Sequence[str]) -> dict[str, int]:
    """Pair each report id with its fitted cluster label."""
    if len(ids) != len(model.labels):
        raise ContractError(f"{len(ids)} ids vs {len(model.labels)} fitted labels")
    return {report_id: int(model.labels[i]) for i, report_id in enumerate(ids)}


def save_labels(path: str, labels: dict[str, int]) -> None:
    write_ndjson(path, [{"id": i, "label": labels[i]} for i in labels])


def load_labels(path: str) -> dict[str, int]:
    out: dict[str, int] = {}
    for lineno, row in enumerate(read_ndjson(path), start=1):
        if "id" not in row or "label" not in row:
            raise IngestionError(f"line {lineno}: label row needs 'id' and 'label'")
        out[row["id"]] = int(row["label"])
    return out
