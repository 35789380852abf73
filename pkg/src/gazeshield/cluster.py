"""Nearest-neighbour matching, k-means model selection, novelty thresholds and PCA."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from . import rng as rng_mod


def _as_matrix(X, name: str = "X") -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError(f"{name} must be a non-empty 2-D matrix, got shape {X.shape}")
    return X


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    # explicit differences: exact zeros for coincident points
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=-1)


_BELOW_ONE = math.nextafter(1.0, 0.0)


def knn_confidence(distance: float) -> float:
    """exp(-distance); 1.0 exactly at distance 0, strictly decreasing."""
    if distance < 0:
        raise ValueError("distance must be >= 0")
    # exp(-d) rounds to 1.0 for d below ~1e-16; keep 1.0 reserved for exact matches
    return math.exp(-distance) if distance == 0 else min(math.exp(-distance), _BELOW_ONE)


@dataclass(frozen=True)
class KnnMatch:
    matched_id: int
    distance: float
    confidence: float
    index: int


def knn1_match(train_X, train_ids, query) -> KnnMatch:
    """Nearest training row by Euclidean distance, confidence ``exp(-distance)``.

    Features must already be scaled with the training scaler.  Distance ties
    go to the lowest training index.
    """
    train_X = _as_matrix(train_X, "train_X")
    q = np.asarray(query, dtype=np.float64).ravel()
    if q.shape[0] != train_X.shape[1]:
        raise ValueError(f"query has {q.shape[0]} features, training data has {train_X.shape[1]}")
    d = np.sqrt(((train_X - q) ** 2).sum(axis=1))
    i = int(np.argmin(d))  # first minimum
    dist = float(d[i])
    return KnnMatch(int(np.asarray(train_ids)[i]), dist, knn_confidence(dist), i)


def knn1_match_batch(train_X, train_ids, queries) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised :func:`knn1_match`: (ids, distances, confidences)."""
    train_X = _as_matrix(train_X, "train_X")
    Q = _as_matrix(queries, "queries")
    if Q.shape[1] != train_X.shape[1]:
        raise ValueError("query dimension does not match training data")
    ids = np.asarray(train_ids)
    idx = np.empty(len(Q), dtype=np.int64)
    dist = np.empty(len(Q))
    for start in range(0, len(Q), 256):
        d = np.sqrt(_sq_dists(Q[start:start + 256], train_X))
        j = np.argmin(d, axis=1)
        idx[start:start + 256] = j
        dist[start:start + 256] = d[np.arange(len(j)), j]
    conf = np.where(dist > 0, np.minimum(np.exp(-dist), _BELOW_ONE), 1.0)
    return ids[idx], dist, conf


@dataclass(frozen=True, eq=False)
class KMeansModel:
    centroids: np.ndarray
    wcss: float
    labels: np.ndarray  # training assignments
    n_init: int
    seed: int
    n_iter: int = 0
    # WCSS after every Lloyd step of the winning restart
    history: tuple[float, ...] = ()

    @property
    def k(self) -> int:
        return len(self.centroids)

    def assign(self, X) -> np.ndarray:
        """Nearest centroid by squared Euclidean distance (lowest index on ties)."""
        return np.argmin(_sq_dists(_as_matrix(X), self.centroids), axis=1)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "centroids": [[repr(float(v)) for v in row] for row in self.centroids],
            "wcss": repr(self.wcss),
            "n_init": self.n_init,
            "seed": self.seed,
        }


def _plusplus(X: np.ndarray, k: int, rng: np.random.Generator, start: np.ndarray | None = None) -> np.ndarray:
    centers = [] if start is None else list(start)
    if not centers:
        centers.append(X[rng.integers(len(X))])
    d2 = _sq_dists(X, np.array(centers)).min(axis=1)
    while len(centers) < k:
        total = d2.sum()
        if total <= 0:
            i = int(rng.integers(len(X)))
        else:
            i = int(rng.choice(len(X), p=d2 / total))
        centers.append(X[i])
        d2 = np.minimum(d2, ((X - X[i]) ** 2).sum(axis=1))
    return np.array(centers, dtype=np.float64)


def _lloyd(X: np.ndarray, centers: np.ndarray, max_iter: int, tol: float = 0.0):
    history = []
    labels = np.argmin(_sq_dists(X, centers), axis=1)
    for it in range(max_iter):
        k = len(centers)
        new = np.zeros_like(centers)
        counts = np.bincount(labels, minlength=k)
        np.add.at(new, labels, X)
        empty = np.flatnonzero(counts == 0)
        nonempty = counts > 0
        new[nonempty] /= counts[nonempty, None]
        if len(empty):
            # repair: move each empty centroid onto the point farthest from its centroid
            dist = ((X - new[labels]) ** 2).sum(axis=1)
            for e in empty:
                far = int(np.argmax(dist))
                new[e] = X[far]
                labels[far] = e
                dist[far] = -1.0
        labels_new = np.argmin(_sq_dists(X, new), axis=1)
        wcss = float(((X - new[labels_new]) ** 2).sum())
        history.append(wcss)
        converged = np.array_equal(labels_new, labels) and not len(empty)
        centers, labels = new, labels_new
        if converged or (len(history) > 1 and history[-2] - wcss <= tol * history[-2] and tol > 0):
            return centers, labels, wcss, it + 1, history
    return centers, labels, float(((X - centers[labels]) ** 2).sum()), max_iter, history


def kmeans_fit(X, k: int, n_init: int = 10, max_iter: int = 300, seed: int = 42,
               init_centroids=None) -> KMeansModel:
    """Lloyd's algorithm from k-means++ seeds; best of ``n_init`` restarts by WCSS.

    Restart ``r`` uses the stream ``(seed, "kmeans", k, r)``.  When
    ``init_centroids`` (fewer than ``k`` rows) is given, one extra restart
    extends them with k-means++; that candidate can only lower WCSS relative
    to the smaller model, which keeps elbow curves monotone.
    """
    X = _as_matrix(X)
    if k < 1 or k > len(X):
        raise ValueError(f"k must be in 1..{len(X)}, got {k}")
    best = None
    candidates = [(r, None) for r in range(n_init)]
    if init_centroids is not None:
        candidates.append((n_init, np.asarray(init_centroids, dtype=np.float64)[:k]))
    for r, start in candidates:
        rng = rng_mod.stream(seed, "kmeans", k, r)
        centers = _plusplus(X, k, rng, start)
        result = _lloyd(X, centers, max_iter)
        if best is None or result[2] < best[2]:
            best = result
    centers, labels, wcss, n_iter, history = best
    return KMeansModel(centers, wcss, labels, n_init, seed, n_iter, tuple(history))


def wcss_curve(X, k_range, seed: int = 42, n_init: int = 10, max_iter: int = 300) -> list[tuple[int, float]]:
    """(k, WCSS) for each k; each fit also tries extending the previous centroids."""
    ks = sorted(set(int(k) for k in k_range))
    if not ks:
        raise ValueError("k_range is empty")
    X = _as_matrix(X)
    if ks[-1] > len(X):
        raise ValueError(f"k={ks[-1]} exceeds the number of points ({len(X)})")
    curve, prev = [], None
    for k in ks:
        model = kmeans_fit(X, k, n_init, max_iter, seed, init_centroids=prev)
        curve.append((k, model.wcss))
        prev = model.centroids
    return curve


def fit_kmeans_range(X, k_range, seed: int = 42, n_init: int = 10) -> dict[int, KMeansModel]:
    """Fitted models for every k in ``k_range`` (same seeding discipline as wcss_curve)."""
    X = _as_matrix(X)
    models, prev = {}, None
    for k in sorted(set(int(k) for k in k_range)):
        models[k] = kmeans_fit(X, k, n_init, seed=seed, init_centroids=prev)
        prev = models[k].centroids
    return models


def silhouette_samples(X, labels) -> np.ndarray:
    """Per-point silhouette ``(b - a) / max(a, b)``; singleton clusters score 0."""
    X = _as_matrix(X)
    labels = np.asarray(labels)
    clusters = np.unique(labels)
    if len(clusters) < 2:
        raise ValueError("silhouette needs at least 2 clusters")
    index = np.searchsorted(clusters, labels)
    sizes = np.bincount(index, minlength=len(clusters)).astype(np.float64)
    # per-cluster distance sums, chunked to bound memory at O(chunk * N)
    sums = np.zeros((len(X), len(clusters)))
    for start in range(0, len(X), 128):
        d = np.sqrt(_sq_dists(X[start:start + 128], X))
        for c in range(len(clusters)):
            sums[start:start + 128, c] = d[:, index == c].sum(axis=1)
    rows = np.arange(len(X))
    own = sizes[index]
    a = np.where(own > 1, sums[rows, index] / np.maximum(own - 1, 1), 0.0)
    other = sums / sizes
    other[rows, index] = np.inf
    b = other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return np.where(own > 1, s, 0.0)


def silhouette(X, labels) -> float:
    return float(silhouette_samples(X, labels).mean())


def novelty_score(x, model: KMeansModel) -> float:
    """Unsquared Euclidean distance to the nearest centroid."""
    x = np.asarray(x, dtype=np.float64).ravel()
    return float(np.sqrt(((model.centroids - x) ** 2).sum(axis=1)).min())


def novelty_scores(X, model: KMeansModel) -> np.ndarray:
    return np.sqrt(_sq_dists(_as_matrix(X), model.centroids).min(axis=1))


@dataclass(frozen=True, eq=False)
class NoveltyThreshold:
    tau: float
    percentile: float
    source_distances: np.ndarray
    manual: bool = False


def novelty_threshold(existing_X, model: KMeansModel, percentile: float = 95.0,
                      override: float | None = None) -> NoveltyThreshold:
    """tau = linear-interpolated percentile of the existing points' novelty scores.

    ``override`` replaces the data-driven tau with a fixed value.
    """
    d = novelty_scores(existing_X, model)
    if override is not None:
        if override < 0:
            raise ValueError("a manual tau must be >= 0")
        return NoveltyThreshold(float(override), percentile, d, manual=True)
    return NoveltyThreshold(float(np.percentile(d, percentile, method="linear")), percentile, d)


def is_outlier(x, model: KMeansModel, threshold: NoveltyThreshold) -> bool:
    return novelty_score(x, model) > threshold.tau


@dataclass(frozen=True, eq=False)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (n_components, d), orthonormal rows
    explained_variance_ratio: np.ndarray

    def project(self, X) -> np.ndarray:
        return (_as_matrix(X) - self.mean) @ self.components.T

    def reconstruct(self, Z) -> np.ndarray:
        return np.asarray(Z) @ self.components + self.mean


def pca_fit(X, n_components: int = 2) -> PcaModel:
    """Top eigenvectors of the covariance; each sign fixed so its largest-|.| entry is positive."""
    X = _as_matrix(X)
    n, d = X.shape
    if n < 2 or d < 2:
        raise ValueError("PCA needs at least 2 samples and 2 features")
    if n_components > d:
        raise ValueError("n_components exceeds feature count")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    total = float(np.trace(cov))
    if total <= 0:
        raise ValueError("data has zero variance")
    order = np.argsort(evals)[::-1][:n_components]
    comps = evecs[:, order].T.copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1
    ratios = np.clip(evals[order], 0.0, None) / total
    return PcaModel(mean, comps, ratios)


def pca_project(model: PcaModel, X) -> np.ndarray:
    return model.project(X)


def curve_csv(curve, silhouettes: dict[int, float] | None = None) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["k", "wcss"] + (["silhouette"] if silhouettes is not None else []))
    for k, w in curve:
        row = [k, repr(float(w))]
        if silhouettes is not None:
            row.append(repr(float(silhouettes[k])) if k in silhouettes else "")
        writer.writerow(row)
    return buf.getvalue()
