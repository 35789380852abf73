"""Isolation forest anomaly scoring: ``s(x) = 2 ** (-E[h(x)] / c(psi))``."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rng as rng_mod

EULER_GAMMA = 0.5772156649015329
DEFAULT_THRESHOLD = 0.5


def average_path_length(n) -> float:
    """Mean unsuccessful-search depth in a BST of ``n`` points: 0, 1, then the harmonic form."""
    n = float(n)
    if n <= 1:
        return 0.0
    if n == 2:
        return 1.0
    return 2.0 * (math.log(n - 1.0) + EULER_GAMMA) - 2.0 * (n - 1.0) / n


@dataclass(frozen=True, eq=False)
class IsolationTree:
    # flat arrays; leaves have feature == -1
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    size: np.ndarray  # training points that reached the node
    adjust: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        # expected extra depth below each leaf, from its training size
        object.__setattr__(self, "adjust", np.array([average_path_length(s) for s in self.size]))

    @property
    def height(self) -> int:
        depth = {0: 0}
        for node in range(len(self.feature)):
            if self.feature[node] >= 0:
                depth[int(self.left[node])] = depth[node] + 1
                depth[int(self.right[node])] = depth[node] + 1
        return max(depth.values())

    def path_lengths(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        depth = np.zeros(len(X))
        active = self.feature[node] >= 0
        while active.any():
            idx = np.flatnonzero(active)
            n = node[idx]
            go_left = X[idx, self.feature[n]] < self.threshold[n]
            node[idx] = np.where(go_left, self.left[n], self.right[n])
            depth[idx] += 1
            active = self.feature[node] >= 0
        return depth + self.adjust[node]


def _grow(X: np.ndarray, height_limit: int, rng: np.random.Generator) -> IsolationTree:
    feature, threshold, left, right, size = [], [], [], [], []

    def new_node(n):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        size.append(n)
        return len(feature) - 1

    stack = [(new_node(len(X)), np.arange(len(X)), 0)]
    while stack:
        node, rows, depth = stack.pop()
        if depth >= height_limit or len(rows) <= 1:
            continue
        sub = X[rows]
        lo, hi = sub.min(axis=0), sub.max(axis=0)
        splittable = np.flatnonzero(hi > lo)
        if len(splittable) == 0:
            continue
        f = int(splittable[rng.integers(len(splittable))])
        t = float(lo[f] + rng.random() * (hi[f] - lo[f]))
        if t <= lo[f]:
            t = float(np.nextafter(lo[f], hi[f]))
        mask = sub[:, f] < t
        feature[node], threshold[node] = f, t
        li, ri = new_node(int(mask.sum())), new_node(int((~mask).sum()))
        left[node], right[node] = li, ri
        stack.append((ri, rows[~mask], depth + 1))
        stack.append((li, rows[mask], depth + 1))
    return IsolationTree(
        np.array(feature, dtype=np.int64),
        np.array(threshold, dtype=np.float64),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(size, dtype=np.int64),
    )


@dataclass(frozen=True, eq=False)
class IsolationForestModel:
    trees: tuple[IsolationTree, ...]
    subsample_size: int
    n_trees: int
    seed: int
    threshold: float = DEFAULT_THRESHOLD

    @property
    def height_limit(self) -> int:
        return max(1, math.ceil(math.log2(self.subsample_size)))

    def scores(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        mean_h = np.mean([t.path_lengths(X) for t in self.trees], axis=0)
        return 2.0 ** (-mean_h / average_path_length(self.subsample_size))

    def is_anomaly(self, X) -> np.ndarray:
        return self.scores(X) > self.threshold

    def to_dict(self) -> dict:
        return {
            "format": "gazeshield.iforest",
            "version": 1,
            "subsample_size": self.subsample_size,
            "n_trees": self.n_trees,
            "seed": self.seed,
            "threshold": self.threshold,
            "trees": [
                {
                    "feature": t.feature.tolist(),
                    "threshold": [repr(float(v)) for v in t.threshold],
                    "left": t.left.tolist(),
                    "right": t.right.tolist(),
                    "size": t.size.tolist(),
                }
                for t in self.trees
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> IsolationForestModel:
        if doc.get("format") != "gazeshield.iforest":
            raise ValueError("not an isolation forest document")
        trees = tuple(
            IsolationTree(
                np.array(t["feature"], dtype=np.int64),
                np.array([float(v) for v in t["threshold"]]),
                np.array(t["left"], dtype=np.int64),
                np.array(t["right"], dtype=np.int64),
                np.array(t["size"], dtype=np.int64),
            )
            for t in doc["trees"]
        )
        return cls(trees, int(doc["subsample_size"]), int(doc["n_trees"]), int(doc["seed"]),
                   float(doc.get("threshold", DEFAULT_THRESHOLD)))


def isolation_forest_fit(X, n_trees: int = 100, subsample_size: int | None = 256, seed: int = 42,
                         threshold: float = DEFAULT_THRESHOLD) -> IsolationForestModel:
    """Each tree sees ``subsample_size`` rows drawn without replacement (capped at N)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("isolation_forest_fit needs a non-empty 2-D matrix")
    psi = len(X) if subsample_size is None else min(int(subsample_size), len(X))
    if psi < 2:
        raise ValueError(f"subsample size must be >= 2, got {psi}")
    if n_trees < 1:
        raise ValueError("n_trees must be >= 1")
    limit = max(1, math.ceil(math.log2(psi)))
    trees = []
    for t in range(n_trees):
        rng = rng_mod.stream(seed, "iforest", t)
        rows = rng.choice(len(X), size=psi, replace=False)
        trees.append(_grow(X[rows], limit, rng))
    return IsolationForestModel(tuple(trees), psi, n_trees, seed, threshold)


def anomaly_score(model: IsolationForestModel, x) -> float:
    return float(model.scores(np.asarray(x, dtype=np.float64).ravel())[0])
