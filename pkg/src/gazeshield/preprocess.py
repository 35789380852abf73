"""Feature scaling and dataset partitioning (level split, stratified split, stratified k-fold)."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import rng as rng_mod
from .data import Dataset


@dataclass(frozen=True, eq=False)
class FittedScaler:
    """Per-feature affine map ``(x - offset) / scale``.

    ``minmax``: offset = min, scale = max - min.  ``zscore``: offset = mean,
    scale = population std.  Constant features get scale 0 and map to 0.
    """

    kind: str
    offset: np.ndarray
    scale: np.ndarray
    n_samples: int = 0
    # second moment kept so client scalers can be pooled exactly
    sq_mean: np.ndarray | None = None

    @property
    def n_features(self) -> int:
        return len(self.offset)

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"scaler was fitted on {self.n_features} features, got shape {X.shape}")
        safe = np.where(self.scale > 0, self.scale, 1.0)
        return np.where(self.scale > 0, (X - self.offset) / safe, 0.0)

    def to_dict(self) -> dict:
        doc = {
            "kind": self.kind,
            "offset": [repr(float(v)) for v in self.offset],
            "scale": [repr(float(v)) for v in self.scale],
            "n_samples": self.n_samples,
        }
        if self.sq_mean is not None:
            doc["sq_mean"] = [repr(float(v)) for v in self.sq_mean]
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> FittedScaler:
        sq = doc.get("sq_mean")
        return cls(
            doc["kind"],
            np.array([float(v) for v in doc["offset"]]),
            np.array([float(v) for v in doc["scale"]]),
            int(doc.get("n_samples", 0)),
            None if sq is None else np.array([float(v) for v in sq]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> FittedScaler:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def fit_scaler(X, kind: str = "zscore") -> FittedScaler:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("fit_scaler needs a non-empty 2-D matrix")
    if kind == "minmax":
        lo, hi = X.min(axis=0), X.max(axis=0)
        return FittedScaler("minmax", lo, hi - lo, len(X))
    if kind == "zscore":
        mean = X.mean(axis=0)
        # rounding can leave a tiny std on a constant column; force it to 0
        std = np.where(X.max(axis=0) > X.min(axis=0), X.std(axis=0), 0.0)
        return FittedScaler("zscore", mean, std, len(X), (X**2).mean(axis=0))
    raise ValueError(f"unknown scaler kind {kind!r}")


def transform(scaler: FittedScaler, X) -> np.ndarray:
    return scaler.transform(X)


def pool_zscore(scalers: Sequence[FittedScaler]) -> FittedScaler:
    """Combine per-client z-score scalers into the scaler of the pooled data.

    Only counts and first/second moments are shared, never rows.
    """
    if not scalers or any(s.kind != "zscore" or s.sq_mean is None for s in scalers):
        raise ValueError("pool_zscore needs z-score scalers that carry second moments")
    n = np.array([s.n_samples for s in scalers], dtype=np.float64)
    w = n / n.sum()
    mean = sum(wi * s.offset for wi, s in zip(w, scalers))
    sq = sum(wi * s.sq_mean for wi, s in zip(w, scalers))
    var = np.maximum(sq - mean**2, 0.0)
    return FittedScaler("zscore", mean, np.sqrt(var), int(n.sum()), sq)


@dataclass(frozen=True)
class SplitPlan:
    train_indices: tuple[int, ...]
    test_indices: tuple[int, ...]
    description: str = ""
    n_excluded: int = 0

    def __post_init__(self):
        if set(self.train_indices) & set(self.test_indices):
            raise ValueError("train and test indices overlap")

    @property
    def train(self) -> np.ndarray:
        return np.array(self.train_indices, dtype=np.int64)

    @property
    def test(self) -> np.ndarray:
        return np.array(self.test_indices, dtype=np.int64)


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple[tuple[int, ...], ...]

    @property
    def k(self) -> int:
        return len(self.folds)

    def split(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """(train, validation) index arrays for fold ``i``."""
        val = np.array(self.folds[i], dtype=np.int64)
        train = np.sort(np.concatenate([self.folds[j] for j in range(self.k) if j != i]).astype(np.int64))
        return train, val


def split_by_level(ds: Dataset, train_levels, test_levels) -> SplitPlan:
    train_levels, test_levels = set(train_levels), set(test_levels)
    if train_levels & test_levels:
        raise ValueError(f"levels {sorted(train_levels & test_levels)} are on both sides")
    train = np.flatnonzero(np.isin(ds.game_level, sorted(train_levels)))
    test = np.flatnonzero(np.isin(ds.game_level, sorted(test_levels)))
    if len(train) == 0 or len(test) == 0:
        raise ValueError(f"level split leaves an empty side (train={len(train)}, test={len(test)})")
    return SplitPlan(tuple(train.tolist()), tuple(test.tolist()),
                     f"levels {sorted(train_levels)} vs {sorted(test_levels)}",
                     len(ds) - len(train) - len(test))


def _class_groups(labels) -> tuple[np.ndarray, list[np.ndarray]]:
    labels = np.asarray(labels)
    classes = np.unique(labels)
    return classes, [np.flatnonzero(labels == c) for c in classes]


def _largest_remainder(counts: np.ndarray, frac: float) -> np.ndarray:
    ideal = counts * frac
    alloc = np.floor(ideal).astype(np.int64)
    total = int(np.floor(counts.sum() * frac + 0.5))
    remainder = ideal - alloc
    # stable sort: equal remainders go to the lower class index first
    for c in np.argsort(-remainder, kind="stable")[: max(0, total - alloc.sum())]:
        alloc[c] += 1
    return alloc


def random_stratified_split(labels, train_frac: float = 0.6, seed: int = 42) -> SplitPlan:
    """Per-class random split; per-class train counts by largest remainder."""
    if not 0 < train_frac < 1:
        raise ValueError(f"train_frac must be in (0, 1), got {train_frac}")
    classes, groups = _class_groups(labels)
    counts = np.array([len(g) for g in groups])
    if np.any(counts < 2):
        raise ValueError(f"classes {classes[counts < 2].tolist()} have fewer than 2 samples")
    alloc = _largest_remainder(counts, train_frac)
    rng = rng_mod.stream(seed, "split")
    train, test = [], []
    for g, n_train in zip(groups, alloc):
        perm = rng.permutation(g)
        train.append(perm[:n_train])
        test.append(perm[n_train:])
    return SplitPlan(tuple(np.sort(np.concatenate(train)).tolist()),
                     tuple(np.sort(np.concatenate(test)).tolist()),
                     f"stratified random split, train_frac={train_frac}, seed={seed}")


def stratified_kfold(labels, k: int = 5, seed: int = 42, stream_name: str = "kfold") -> FoldPlan:
    """Stratified folds: each class is shuffled and dealt round-robin.

    The dealing position carries over between classes, so every class gets
    floor or ceil of n_c/k per fold and fold sizes differ by at most one.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    classes, groups = _class_groups(labels)
    small = [c for c, g in zip(classes.tolist(), groups) if len(g) < k]
    if small:
        raise ValueError(f"classes {small} have fewer than k={k} samples")
    rng = rng_mod.stream(seed, stream_name)
    folds = [[] for _ in range(k)]
    offset = 0
    for g in groups:
        for j, i in enumerate(rng.permutation(g)):
            folds[(offset + j) % k].append(int(i))
        offset += len(g)
    return FoldPlan(tuple(tuple(sorted(f)) for f in folds))


def cv_mean(scores) -> float:
    scores = list(scores)
    if not scores:
        raise ValueError("cv_mean of an empty score list")
    return float(sum(scores) / len(scores))
