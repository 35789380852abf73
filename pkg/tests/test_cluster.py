import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gazeshield.cluster import (KMeansModel, curve_csv, is_outlier, kmeans_fit, knn1_match, knn1_match_batch,
                                knn_confidence, novelty_score, novelty_scores, novelty_threshold, pca_fit,
                                pca_project, silhouette, silhouette_samples, wcss_curve)
from gazeshield.data import SyntheticConfig, encode_labels, generate_synthetic

coord = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_knn_exact_match():
    X = np.array([[0.0, 0.0], [1.0, 2.0], [5.0, 5.0]])
    m = knn1_match(X, [4, 8, 9], [1.0, 2.0])
    assert (m.matched_id, m.distance, m.confidence) == (8, 0.0, 1.0)


def test_knn_confidence_reported_value():
    assert abs(knn_confidence(2.69) - 0.0678) <= 2e-4


def test_knn_tie_goes_to_lowest_index():
    X = np.array([[1.0, 0.0], [-1.0, 0.0]])
    assert knn1_match(X, [3, 7], [0.0, 0.0]).matched_id == 3


def test_knn_dimension_error():
    with pytest.raises(ValueError):
        knn1_match(np.zeros((2, 3)), [1, 2], [0.0, 0.0])


def test_knn_batch_agrees(rng):
    X = rng.normal(size=(40, 3))
    ids = np.arange(40) + 100
    Q = rng.normal(size=(25, 3))
    b_ids, b_d, b_c = knn1_match_batch(X, ids, Q)
    for q, i, d, c in zip(Q, b_ids, b_d, b_c):
        m = knn1_match(X, ids, q)
        assert m.matched_id == i and m.distance == pytest.approx(d) and m.confidence == pytest.approx(c)


@given(st.floats(0, 50), st.floats(0, 50))
def test_confidence_monotone(a, b):
    if a < b and math.exp(-a) != math.exp(-b):
        assert knn_confidence(a) > knn_confidence(b)
    assert (knn_confidence(a) == 1.0) == (a == 0.0)


def test_kmeans_k1_is_mean(rng):
    X = rng.normal(size=(30, 4))
    m = kmeans_fit(X, 1, n_init=2)
    assert np.allclose(m.centroids[0], X.mean(0))
    assert m.wcss == pytest.approx(X.var(0).sum() * len(X))


def test_kmeans_two_pairs_brute_force():
    X = np.array([[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]])
    # every 2-partition of the 4 points; keep the lowest scatter
    best = None
    for mask in itertools.product([0, 1], repeat=4):
        if len(set(mask)) < 2 or mask[0] == 1:
            continue
        mask = np.array(mask)
        cost = sum(((X[mask == c] - X[mask == c].mean(0)) ** 2).sum() for c in (0, 1))
        if best is None or cost < best[0]:
            best = (cost, sorted(tuple(X[mask == c].mean(0)) for c in (0, 1)))
    m = kmeans_fit(X, 2, seed=3)
    assert sorted(tuple(c) for c in m.centroids) == best[1]
    assert m.wcss == pytest.approx(best[0])


def test_kmeans_determinism_and_errors(rng):
    X = rng.normal(size=(50, 2))
    a, b = kmeans_fit(X, 3, seed=9), kmeans_fit(X, 3, seed=9)
    assert np.array_equal(a.centroids, b.centroids)
    with pytest.raises(ValueError):
        kmeans_fit(X, 51)
    with pytest.raises(ValueError):
        kmeans_fit(X, 0)


@given(hnp.arrays(np.float64, st.tuples(st.integers(3, 40), st.integers(1, 3)), elements=coord),
       st.integers(1, 3), st.integers(0, 1000))
def test_kmeans_invariants(X, k, seed):
    k = min(k, len(X))
    m = kmeans_fit(X, k, n_init=2, seed=seed)
    direct = float(((X[:, None] - m.centroids[None]) ** 2).sum(-1).min(1).sum())
    assert m.wcss == pytest.approx(direct, rel=1e-6, abs=1e-9)
    assert np.all(np.isfinite(m.centroids))
    h = np.array(m.history)
    assert np.all(np.diff(h) <= 1e-9 * np.maximum(1.0, h[:-1]))


def test_empty_cluster_repair():
    X = np.array([[0.0], [0.0], [0.0], [10.0]])
    m = kmeans_fit(X, 2, n_init=1)
    assert m.wcss == 0.0


def test_wcss_curve_examples(default_ds):
    X, _, _ = encode_labels(default_ds, "student_id")
    X = (X - X.mean(0)) / X.std(0)
    curve = wcss_curve(X, range(2, 7), seed=42, n_init=3)
    assert [k for k, _ in curve] == [2, 3, 4, 5, 6]
    w = [v for _, v in curve]
    assert all(b < a for a, b in zip(w, w[1:]))
    small = np.array([[0.0, 1.0], [2.0, 3.0], [5.0, -1.0]])
    assert wcss_curve(small, [3])[0][1] == 0.0
    assert wcss_curve(small, [1])[0][1] == pytest.approx(((small - small.mean(0)) ** 2).sum())
    with pytest.raises(ValueError):
        wcss_curve(small, [])


@given(hnp.arrays(np.float64, st.tuples(st.integers(6, 25), st.just(2)), elements=coord), st.integers(0, 99))
def test_wcss_curve_monotone(X, seed):
    w = [v for _, v in wcss_curve(X, range(1, 6), seed=seed, n_init=2)]
    assert all(b <= a + 1e-9 * max(1.0, a) for a, b in zip(w, w[1:]))


def _silhouette_brute(X, labels):
    out = []
    for i in range(len(X)):
        same = [j for j in range(len(X)) if labels[j] == labels[i] and j != i]
        if not same:
            out.append(0.0)
            continue
        a = np.mean([np.linalg.norm(X[i] - X[j]) for j in same])
        b = min(np.mean([np.linalg.norm(X[i] - X[j]) for j in range(len(X)) if labels[j] == c])
                for c in set(labels) if c != labels[i])
        out.append((b - a) / max(a, b) if max(a, b) > 0 else 0.0)
    return np.array(out)


def test_silhouette_separated_blobs():
    X = np.array([[0, 0], [0.1, 0], [0, 0.1], [10, 10], [10.1, 10], [10, 10.1]])
    labels = [0, 0, 0, 1, 1, 1]
    assert silhouette(X, labels) > 0.9
    assert np.allclose(silhouette_samples(X, labels), _silhouette_brute(X, labels))


@given(hnp.arrays(np.float64, st.tuples(st.integers(3, 20), st.just(2)), elements=coord),
       st.data())
def test_silhouette_matches_brute_force(X, data):
    labels = data.draw(st.lists(st.integers(0, 2), min_size=len(X), max_size=len(X)))
    if len(set(labels)) < 2:
        with pytest.raises(ValueError):
            silhouette(X, labels)
        return
    s = silhouette_samples(X, labels)
    assert np.allclose(s, _silhouette_brute(X, labels), atol=1e-9)
    assert np.all((s >= -1 - 1e-12) & (s <= 1 + 1e-12))


def test_silhouette_random_labels_near_zero():
    vals = []
    for seed in range(10):
        r = np.random.default_rng(seed)
        X = r.normal(size=(200, 2))
        vals.append(silhouette(X, r.permutation(np.repeat([0, 1], 100))))
    assert abs(np.mean(vals)) < 0.2


def test_silhouette_singletons():
    assert silhouette([[0.0, 0.0], [1.0, 1.0]], [0, 1]) == 0.0
    with pytest.raises(ValueError):
        silhouette([[0.0], [1.0]], [0, 0])


def _model(centroids):
    c = np.asarray(centroids, dtype=float)
    return KMeansModel(c, 0.0, np.zeros(0, dtype=int), 1, 0)


def test_novelty_examples():
    m = _model([[0.0, 0.0], [3.0, 4.0]])
    assert novelty_score([0.0, 0.0], m) == 0.0
    assert novelty_score([3.0, 0.0], m) == 3.0


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.just(3)), elements=coord),
       hnp.arrays(np.float64, 3, elements=coord))
def test_novelty_brute_force(C, x):
    m = _model(C)
    loop = min(math.sqrt(sum((a - b) ** 2 for a, b in zip(x, c))) for c in C)
    assert novelty_score(x, m) == pytest.approx(loop, abs=1e-9)
    assert (novelty_score(C[0], m) == 0.0)


def test_percentile_hand_interpolation():
    # distances 1..20 along a line from a single centroid at 0
    m = _model([[0.0]])
    X = np.arange(1, 21, dtype=float)[:, None]
    pos = 0.95 * 19
    lo = math.floor(pos)
    expected = (lo + 1) + (pos - lo) * 1.0
    t = novelty_threshold(X, m, 95)
    assert expected == pytest.approx(19.05)
    assert t.tau == pytest.approx(expected, abs=1e-12)
    assert len(t.source_distances) == 20


def test_threshold_equal_distances_and_override():
    m = _model([[0.0, 0.0]])
    X = np.array([[2.0, 0.0], [0.0, 2.0], [-2.0, 0.0]])
    t = novelty_threshold(X, m)
    assert t.tau == 2.0
    assert not is_outlier([0.0, 2.0], m, t) and not is_outlier([1.0, 1.0], m, t)
    assert is_outlier([3.0, 0.0], m, t)
    man = novelty_threshold(X, m, override=0.5)
    assert man.manual and man.tau == 0.5
    with pytest.raises(ValueError):
        novelty_threshold(X, m, override=-1)


@given(hnp.arrays(np.float64, st.tuples(st.integers(2, 30), st.just(2)), elements=coord))
def test_outlier_monotone(Q):
    m = _model([[0.0, 0.0], [5.0, 5.0]])
    t = novelty_threshold(Q, m)
    scores = novelty_scores(Q, m)
    flags = np.array([is_outlier(q, m, t) for q in Q])
    for s, f in zip(scores, flags):
        if not f:
            assert not np.any(flags[scores <= s])


def test_pca_line():
    x = np.linspace(-3, 5, 20)
    p = pca_fit(np.column_stack([x, 2 * x]))
    assert p.explained_variance_ratio[0] == pytest.approx(1.0, abs=1e-9)
    assert p.explained_variance_ratio[1] == pytest.approx(0.0, abs=1e-9)
    assert np.allclose(pca_project(p, p.mean[None]), 0.0)


def test_pca_rank2_reconstruction(rng):
    A = rng.normal(size=(40, 2)) @ rng.normal(size=(2, 5)) + rng.normal(size=5)
    p = pca_fit(A)
    assert np.max(np.abs(p.reconstruct(p.project(A)) - A)) <= 1e-9
    assert np.allclose(p.components @ p.components.T, np.eye(2), atol=1e-9)
    r = p.explained_variance_ratio
    assert r[0] >= r[1] >= 0 and r.sum() <= 1 + 1e-12
    with pytest.raises(ValueError):
        pca_fit(np.ones((5, 3)))


def test_curve_csv():
    assert curve_csv([(2, 1.5), (3, 0.5)], {2: 0.7}) == "k,wcss,silhouette\n2,1.5,0.7\n3,0.5,\n"


def test_synthetic_novelty_separates_far_student():
    ds = generate_synthetic(SyntheticConfig(outlier_offset=8.0, seed=0))
    X, y, lm = encode_labels(ds, "student_id")
    X = (X - X.mean(0)) / X.std(0)
    held = y == lm.encode(["9"])[0]
    m = kmeans_fit(X[~held], 8, n_init=3)
    t = novelty_threshold(X[~held], m)
    assert np.mean(novelty_scores(X[held], m) > t.tau) >= 0.95
