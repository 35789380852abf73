"""Strategies that decide whether a query profile belongs to a known student or needs a new id."""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .cluster import KMeansModel, NoveltyThreshold, knn1_match, novelty_score
from .iforest import IsolationForestModel, anomaly_score

ID_SPACE = 10000
STRATEGIES = ("sequential", "similarity", "outlier", "clustering", "feature_hash", "ensemble")
MATCHED, NEW_ID = "matched", "new_id"


class AssignmentError(ValueError):
    pass


@dataclass(frozen=True)
class AssignmentDecision:
    strategy: str
    outcome: str  # MATCHED or NEW_ID
    student_id: int
    evidence: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.outcome not in (MATCHED, NEW_ID):
            raise ValueError(f"unknown outcome {self.outcome!r}")

    @property
    def is_new(self) -> bool:
        return self.outcome == NEW_ID

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "outcome": self.outcome,
                "student_id": self.student_id, "evidence": dict(self.evidence)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _next_id(existing_ids) -> int:
    ids = [int(i) for i in existing_ids]
    if not ids:
        raise AssignmentError("existing id set is empty")
    return max(ids) + 1


def sequential_assign(existing_ids) -> AssignmentDecision:
    return AssignmentDecision("sequential", NEW_ID, _next_id(existing_ids))


def similarity_assign(query, known_X, known_ids, confidence_threshold: float = 0.5) -> AssignmentDecision:
    """Match when the 1-NN confidence reaches the threshold (inclusive)."""
    if not 0 < confidence_threshold < 1:
        raise AssignmentError("confidence threshold must be in (0, 1)")
    m = knn1_match(known_X, known_ids, query)
    evidence = {"distance": m.distance, "confidence": m.confidence, "nearest_id": m.matched_id}
    if m.confidence >= confidence_threshold:
        return AssignmentDecision("similarity", MATCHED, m.matched_id, evidence)
    return AssignmentDecision("similarity", NEW_ID, _next_id(known_ids), evidence)


def outlier_assign(query, iforest: IsolationForestModel, known_X, known_ids) -> AssignmentDecision:
    """New when the anomaly score is strictly above the forest's threshold."""
    score = anomaly_score(iforest, query)
    evidence = {"anomaly_score": score, "threshold": iforest.threshold}
    if score > iforest.threshold:
        return AssignmentDecision("outlier", NEW_ID, _next_id(known_ids), evidence)
    m = knn1_match(known_X, known_ids, query)
    evidence["distance"] = m.distance
    return AssignmentDecision("outlier", MATCHED, m.matched_id, evidence)


def cluster_assign(query, kmeans: KMeansModel, threshold: NoveltyThreshold, member_ids,
                   existing_ids=None) -> AssignmentDecision:
    """Nearest cluster; novel queries get a new id, others the cluster's majority id.

    ``member_ids`` gives the known id of each row the k-means model was fit
    on (aligned with ``kmeans.labels``).
    """
    member_ids = np.asarray(member_ids)
    if len(member_ids) != len(kmeans.labels):
        raise AssignmentError("member_ids must align with the k-means training rows")
    existing = member_ids if existing_ids is None else existing_ids
    q = np.asarray(query, dtype=np.float64).ravel()
    cluster = int(np.argmin(((kmeans.centroids - q) ** 2).sum(axis=1)))
    score = novelty_score(q, kmeans)
    evidence = {"cluster": cluster, "novelty_score": score, "tau": threshold.tau}
    if score > threshold.tau:
        return AssignmentDecision("clustering", NEW_ID, _next_id(existing), evidence)
    members = member_ids[kmeans.labels == cluster]
    if len(members) == 0:
        evidence["empty_cluster"] = True
        return AssignmentDecision("clustering", NEW_ID, _next_id(existing), evidence)
    counts = Counter(int(i) for i in members)
    top = max(counts.values())
    winner = min(i for i, c in counts.items() if c == top)
    evidence["cluster_share"] = top / len(members)
    return AssignmentDecision("clustering", MATCHED, winner, evidence)


def canonical_feature_string(features) -> str:
    values = np.asarray(features, dtype=np.float64).ravel()
    if not np.all(np.isfinite(values)):
        raise AssignmentError("features must be finite")
    return ",".join(f"{v:.6f}" for v in values)


def feature_hash_id(features, existing_ids=()) -> AssignmentDecision:
    """MD5 of the canonical string, first 8 hex digits mod 10000, bumped past taken ids."""
    text = canonical_feature_string(features)
    digest = hashlib.md5(text.encode("ascii")).hexdigest()
    base = int(digest[:8], 16) % ID_SPACE
    taken = {int(i) for i in existing_ids}
    if len(taken & set(range(ID_SPACE))) >= ID_SPACE:
        raise AssignmentError("all 10000 ids are taken")
    sid, steps = base, 0
    while sid in taken:
        sid = (sid + 1) % ID_SPACE
        steps += 1
    evidence = {"canonical": text, "md5_prefix": digest[:8], "hash_id": base, "collision_steps": steps}
    return AssignmentDecision("feature_hash", NEW_ID, sid, evidence)


@dataclass(frozen=True, eq=False)
class AssignmentContext:
    """Everything fitted on the known students, in scaled feature space."""

    known_X: np.ndarray
    known_ids: np.ndarray
    kmeans: KMeansModel
    novelty: NoveltyThreshold
    iforest: IsolationForestModel
    confidence_threshold: float = 0.5


def _votes(query, ctx: AssignmentContext) -> list[AssignmentDecision]:
    return [
        similarity_assign(query, ctx.known_X, ctx.known_ids, ctx.confidence_threshold),
        outlier_assign(query, ctx.iforest, ctx.known_X, ctx.known_ids),
        cluster_assign(query, ctx.kmeans, ctx.novelty, ctx.known_ids),
    ]


def combine_votes(decisions, known_ids) -> AssignmentDecision:
    """2-of-3 majority over (similarity, outlier, clustering); a match takes the similarity id."""
    decisions = list(decisions)
    if [d.strategy for d in decisions] != ["similarity", "outlier", "clustering"]:
        raise AssignmentError("the ensemble combines similarity, outlier and clustering, in that order")
    n_new = sum(d.is_new for d in decisions)
    evidence = {f"{d.strategy}_vote": d.outcome for d in decisions}
    evidence["new_votes"] = n_new
    if n_new >= 2:
        return AssignmentDecision("ensemble", NEW_ID, _next_id(known_ids), evidence)
    return AssignmentDecision("ensemble", MATCHED, int(decisions[0].evidence["nearest_id"]), evidence)


def ensemble_assign(query, ctx: AssignmentContext) -> AssignmentDecision:
    return combine_votes(_votes(query, ctx), ctx.known_ids)


def all_strategies(query, ctx: AssignmentContext, raw_features=None) -> list[AssignmentDecision]:
    """All six decisions for one query; ``raw_features`` feed the hash (defaults to the query)."""
    existing = sorted({int(i) for i in ctx.known_ids})
    votes = _votes(query, ctx)
    return [
        sequential_assign(existing),
        *votes,
        feature_hash_id(query if raw_features is None else raw_features, existing),
        combine_votes(votes, existing),
    ]
