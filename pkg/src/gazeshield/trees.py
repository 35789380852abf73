"""CART decision trees and random forests (Gini criterion), written from scratch.

Trees are stored as flat node arrays so prediction is a vectorised walk and
persistence is a plain JSON document.  Split ties are broken by lowest
feature index, then lowest threshold; vote ties by lowest class index.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rng_mod

MODEL_FORMAT_VERSION = 1
_TIE_RTOL = 1e-12


class NotFittedError(RuntimeError):
    pass


def gini(class_counts) -> float:
    """Gini impurity ``1 - sum(p_c^2)`` of a vector of class counts."""
    counts = np.asarray(class_counts, dtype=np.float64)
    if counts.ndim != 1 or np.any(counts < 0):
        raise ValueError("class counts must be a non-negative vector")
    total = counts.sum()
    if total <= 0:
        raise ValueError("gini of an empty node is undefined")
    p = counts / total
    return float(1.0 - np.dot(p, p))


@dataclass(frozen=True)
class TreeConfig:
    max_depth: int | None = None
    min_samples_split: int = 2
    # None = all features at every split; forests pass floor(sqrt(d)).
    max_features: int | None = None
    seed: int = 42
    criterion: str = "gini"

    def __post_init__(self):
        if self.criterion != "gini":
            raise ValueError(f"only the gini criterion is supported, got {self.criterion!r}")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0 or None")
        if self.min_samples_split < 2:
            raise ValueError("min_samples_split must be >= 2")


@dataclass(frozen=True, eq=False)
class TreeModel:
    """A fitted tree.  Node ``i`` is a leaf iff ``feature[i] == -1``."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray  # (n_nodes, n_classes) training class counts per node
    n_features: int
    config: TreeConfig = field(default_factory=TreeConfig)

    @property
    def n_classes(self) -> int:
        return self.counts.shape[1]

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def depth(self) -> int:
        depths = np.zeros(self.n_nodes, dtype=int)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depths[self.left[i]] = depths[self.right[i]] = depths[i] + 1
        return int(depths.max())

    def apply(self, X) -> np.ndarray:
        """Index of the leaf each row of ``X`` lands in."""
        X = _check_X(X, self.n_features)
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        active = self.feature[node] >= 0
        while active.any():
            r = rows[active]
            n = node[r]
            go_left = X[r, self.feature[n]] <= self.threshold[n]
            node[r] = np.where(go_left, self.left[n], self.right[n])
            active = self.feature[node] >= 0
        return node

    def predict(self, X) -> np.ndarray:
        # argmax returns the first maximum: lowest class index wins ties
        return np.argmax(self.counts[self.apply(X)], axis=1)

    def to_dict(self) -> dict:
        return {
            "format": "gazeshield.tree",
            "version": MODEL_FORMAT_VERSION,
            "n_features": self.n_features,
            "n_classes": self.n_classes,
            "config": {
                "max_depth": self.config.max_depth,
                "min_samples_split": self.config.min_samples_split,
                "max_features": self.config.max_features,
                "seed": self.config.seed,
                "criterion": self.config.criterion,
            },
            "nodes": [
                {"leaf": True, "class_counts": self.counts[i].astype(int).tolist()}
                if self.feature[i] < 0
                else {
                    "leaf": False,
                    "feature_index": int(self.feature[i]),
                    # repr() is the shortest string that round-trips exactly
                    "threshold": repr(float(self.threshold[i])),
                    "left": int(self.left[i]),
                    "right": int(self.right[i]),
                    "class_counts": self.counts[i].astype(int).tolist(),
                }
                for i in range(self.n_nodes)
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> TreeModel:
        if doc.get("format") != "gazeshield.tree" or doc.get("version") != MODEL_FORMAT_VERSION:
            raise ValueError("not a version-1 gazeshield tree document")
        nodes = doc["nodes"]
        n = len(nodes)
        feature = np.full(n, -1, dtype=np.int64)
        threshold = np.zeros(n)
        left = np.full(n, -1, dtype=np.int64)
        right = np.full(n, -1, dtype=np.int64)
        counts = np.zeros((n, doc["n_classes"]))
        for i, node in enumerate(nodes):
            counts[i] = node["class_counts"]
            if not node["leaf"]:
                feature[i] = node["feature_index"]
                threshold[i] = float(node["threshold"])
                left[i], right[i] = node["left"], node["right"]
        return cls(feature, threshold, left, right, counts, doc["n_features"], TreeConfig(**doc["config"]))


@dataclass(frozen=True, eq=False)
class ForestModel:
    trees: tuple[TreeModel, ...]
    n_classes: int
    n_features: int
    feature_subsample: int | None
    seed: int
    bootstrap: bool = True

    @property
    def n_estimators(self) -> int:
        return len(self.trees)

    def vote_counts(self, X) -> np.ndarray:
        X = _check_X(X, self.n_features)
        votes = np.zeros((len(X), self.n_classes), dtype=np.int64)
        rows = np.arange(len(X))
        for tree in self.trees:
            votes[rows, tree.predict(X)] += 1
        return votes

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.vote_counts(X), axis=1)

    def to_dict(self) -> dict:
        return {
            "format": "gazeshield.forest",
            "version": MODEL_FORMAT_VERSION,
            "n_classes": self.n_classes,
            "n_features": self.n_features,
            "feature_subsample": self.feature_subsample,
            "seed": self.seed,
            "bootstrap": self.bootstrap,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> ForestModel:
        if doc.get("format") != "gazeshield.forest" or doc.get("version") != MODEL_FORMAT_VERSION:
            raise ValueError("not a version-1 gazeshield forest document")
        trees = tuple(TreeModel.from_dict(t) for t in doc["trees"])
        return cls(trees, doc["n_classes"], doc["n_features"], doc["feature_subsample"],
                   doc["seed"], doc["bootstrap"])


def _check_X(X, n_features: int | None = None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"expected a 2-D feature matrix, got shape {X.shape}")
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"model was fitted on {n_features} features, got {X.shape[1]}")
    return X


def _best_split(Xn: np.ndarray, yn: np.ndarray, n_classes: int, features: np.ndarray):
    """Best (feature, threshold, score) over ``features`` for one node.

    The score is ``sum_c L_c^2/n_L + sum_c R_c^2/n_R``; maximising it
    minimises the weighted child Gini.  Returns None when no feature has two
    distinct values.
    """
    n = len(yn)
    cols = Xn[:, features]
    order = np.argsort(cols, axis=0, kind="stable")
    vals = np.take_along_axis(cols, order, axis=0)
    onehot = np.eye(n_classes)[yn[order]]  # (n, m, C)
    left = np.cumsum(onehot, axis=0)[:-1]  # split after position i
    right = np.bincount(yn, minlength=n_classes).astype(np.float64) - left
    n_left = np.arange(1, n, dtype=np.float64)[:, None]
    score = (left**2).sum(-1) / n_left + (right**2).sum(-1) / (n - n_left)
    valid = vals[1:] > vals[:-1]
    score = np.where(valid, score, -np.inf)
    per_feature = score.max(axis=0)
    best = per_feature.max()
    if not np.isfinite(best):
        return None
    tol = _TIE_RTOL * max(1.0, abs(best))
    # candidate features arrive in ascending index order
    j = int(np.flatnonzero(per_feature >= best - tol)[0])
    pos = int(np.flatnonzero(score[:, j] >= best - tol)[0])
    lo, hi = vals[pos, j], vals[pos + 1, j]
    thr = (lo + hi) / 2.0
    if thr >= hi:  # adjacent floats
        thr = lo
    return int(features[j]), float(thr), float(best)


def fit_tree(X, y, config: TreeConfig | None = None, n_classes: int | None = None,
             rng: np.random.Generator | None = None) -> TreeModel:
    """Grow a tree greedily by weighted Gini decrease.

    ``y`` holds 0-based class indices.  Growth stops at purity, at
    ``max_depth``, below ``min_samples_split``, or when no feature varies.
    Zero-gain splits are allowed (XOR-like data needs them).
    """
    config = config or TreeConfig()
    X = _check_X(X)
    y = np.asarray(y, dtype=np.int64)
    if len(X) < 1 or len(X) != len(y):
        raise ValueError("X and y must be non-empty and of equal length")
    if n_classes is None:
        n_classes = int(y.max()) + 1
    d = X.shape[1]
    m = d if config.max_features is None else max(1, min(d, config.max_features))
    if rng is None:
        rng = rng_mod.stream(config.seed, "tree")

    feature, threshold, left, right, counts = [], [], [], [], []

    def new_node(idx):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        counts.append(np.bincount(y[idx], minlength=n_classes))
        return len(feature) - 1

    root = new_node(np.arange(len(y)))
    stack = [(root, np.arange(len(y)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        if (
            np.count_nonzero(counts[node]) <= 1
            or len(idx) < config.min_samples_split
            or (config.max_depth is not None and depth >= config.max_depth)
        ):
            continue
        Xn, yn = X[idx], y[idx]
        if m == d:
            split = _best_split(Xn, yn, n_classes, np.arange(d))
        else:
            # draw m candidates; if none can split, keep drawing the rest
            perm = rng.permutation(d)
            split = _best_split(Xn, yn, n_classes, np.sort(perm[:m]))
            if split is None and m < d:
                split = _best_split(Xn, yn, n_classes, np.sort(perm[m:]))
        if split is None:
            continue
        f, thr, _ = split
        mask = Xn[:, f] <= thr
        li, ri = idx[mask], idx[~mask]
        feature[node], threshold[node] = f, thr
        left[node] = new_node(li)
        right[node] = new_node(ri)
        # right pushed first so the left subtree is numbered first
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))

    return TreeModel(
        np.array(feature, dtype=np.int64),
        np.array(threshold, dtype=np.float64),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(counts, dtype=np.float64),
        d,
        config,
    )


def fit_forest(X, y, n_estimators: int = 100, max_depth: int | None = None,
               min_samples_split: int = 2, seed: int = 42, n_classes: int | None = None,
               bootstrap: bool = True, max_features: int | str | None = "sqrt") -> ForestModel:
    """Bagged Gini trees with ``floor(sqrt(d))`` candidate features per split.

    Tree ``t`` draws its bootstrap sample and feature subsets from the stream
    ``(seed, "forest", t)``, so results do not depend on training order.
    ``bootstrap=False`` and ``max_features=None`` are test hooks.
    """
    if n_estimators < 1:
        raise ValueError("n_estimators must be >= 1")
    X = _check_X(X)
    y = np.asarray(y, dtype=np.int64)
    if n_classes is None:
        n_classes = int(y.max()) + 1
    n, d = X.shape
    if max_features == "sqrt":
        max_features = max(1, math.isqrt(d))
    trees = []
    for t in range(n_estimators):
        tree_rng = rng_mod.stream(seed, "forest", t)
        idx = tree_rng.integers(0, n, size=n) if bootstrap else np.arange(n)
        config = TreeConfig(max_depth=max_depth, min_samples_split=min_samples_split,
                            max_features=max_features, seed=seed)
        trees.append(fit_tree(X[idx], y[idx], config, n_classes=n_classes, rng=tree_rng))
    return ForestModel(tuple(trees), n_classes, d, max_features, seed, bootstrap)


def predict_tree(model: TreeModel | None, X) -> np.ndarray:
    if model is None:
        raise NotFittedError("tree has not been fitted")
    return model.predict(X)


def predict_forest(model: ForestModel | None, X) -> np.ndarray:
    if model is None:
        raise NotFittedError("forest has not been fitted")
    return model.predict(X)


def _tree_importance(tree: TreeModel) -> np.ndarray:
    imp = np.zeros(tree.n_features)
    for i in np.flatnonzero(tree.feature >= 0):
        c, l, r = tree.counts[i], tree.counts[tree.left[i]], tree.counts[tree.right[i]]
        imp[tree.feature[i]] += c.sum() * gini(c) - l.sum() * gini(l) - r.sum() * gini(r)
    total = imp.sum()
    return imp / total if total > 0 else imp


def feature_importance(model: TreeModel | ForestModel) -> np.ndarray:
    """Mean decrease in impurity per feature, normalised to sum to 1.

    For forests the per-tree normalised importances are averaged.  A model
    that never splits gets all zeros.
    """
    if isinstance(model, TreeModel):
        return _tree_importance(model)
    imp = np.mean([_tree_importance(t) for t in model.trees], axis=0)
    total = imp.sum()
    return imp / total if total > 0 else imp


def save_model(model: TreeModel | ForestModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=1) + "\n", encoding="utf-8")


def load_model(path) -> TreeModel | ForestModel:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") == "gazeshield.forest":
        return ForestModel.from_dict(doc)
    return TreeModel.from_dict(doc)
