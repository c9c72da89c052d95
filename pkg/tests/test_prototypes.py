import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffusion_lstm.prototypes import (CATEGORY_SCALE, SOCIAL_DIM, NormalizationStats,
                                       PrototypeKMeans, PrototypeModel, SocialFeaturizer,
                                       build_features, category_distribution,
                                       fit_prototypes, from_bytes, nearest_centroid, to_bytes)


def _raw(activity, cats):
    return np.hstack([np.atleast_2d(activity), np.atleast_2d(cats)]).astype(float)


def test_feature_examples():
    cats = np.zeros((3, 38))
    cats[1, 5] = 12
    raw = _raw([[10, 20, 30, 40], [5, 5, 5, 5], [1, 1, 1, 1]], cats)
    feats = SocialFeaturizer().fit(raw).transform(raw)
    assert feats.shape == (3, SOCIAL_DIM)
    assert np.allclose(feats[0, :4], 1.0)
    assert feats[1, 4 + 5] == 0.25 and feats[1, 4:].sum() == pytest.approx(0.25)
    assert np.allclose(feats[0, 4:], (1 / 38) / CATEGORY_SCALE)
    assert np.all((feats[:, :4] >= 0) & (feats[:, :4] <= 1))


def test_missing_activity_is_filled_with_training_means():
    raw = _raw([[1, 3, 7, 15], [3, np.nan, 7, 15], [5, 5, 7, 15]], np.ones((3, 38)))
    f = SocialFeaturizer().fit(raw)
    assert f.stats_.fill_means[1] == pytest.approx(4.0)
    feats = f.transform(raw)
    assert np.isfinite(feats).all()
    assert feats[1, 1] == pytest.approx(np.log1p(4.0) / np.log1p(5.0))


def test_values_above_training_max_are_clamped():
    stats = NormalizationStats(np.log1p(np.full(4, 10.0)), np.zeros(4))
    feats = build_features(_raw([1000, 10, 0, 5], np.ones(38)), stats)
    assert feats[0, 0] == 1.0 and feats[0, 1] == 1.0 and feats[0, 2] == 0.0


def test_category_distribution_inverts_the_scaling():
    cats = np.arange(38, dtype=float)
    stats = NormalizationStats(np.ones(4), np.zeros(4))
    feats = build_features(_raw(np.ones(4), cats), stats)
    assert np.allclose(category_distribution(feats)[0], cats / cats.sum())


def test_k_points_k_clusters():
    X = np.random.default_rng(0).normal(size=(6, 3))
    km = PrototypeKMeans(n_clusters=6, random_state=1).fit(X)
    assert km.inertia_ == pytest.approx(0.0, abs=1e-20)
    assert sorted(map(tuple, km.cluster_centers_)) == sorted(map(tuple, X))


def test_kmeans_rejects_bad_k():
    X = np.ones((5, 2))
    with pytest.raises(ValueError):
        PrototypeKMeans(n_clusters=2).fit(X)
    with pytest.raises(ValueError):
        PrototypeKMeans(n_clusters=1).fit(np.eye(3))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_kmeans_objective_never_increases(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(int(rng.integers(20, 200)), int(rng.integers(1, 6))))
    km = PrototypeKMeans(n_clusters=int(rng.integers(2, 8)), max_iter=50, n_init=1,
                         random_state=seed).fit(X)
    h = km.objective_history_
    assert all(b <= a * (1 + 1e-12) for a, b in zip(h, h[1:]))


def test_kmeans_result_is_a_lloyd_fixpoint():
    X = np.random.default_rng(3).normal(size=(300, 4))
    km = PrototypeKMeans(n_clusters=5, random_state=0).fit(X)
    for j in range(5):
        assert np.allclose(km.cluster_centers_[j], X[km.labels_ == j].mean(axis=0))


def test_two_blobs_are_recovered():
    hits = 0
    for seed in range(40):
        rng = np.random.default_rng(seed)
        means = np.array([[0.0, 0.0, 0.0], [4.0, 4.0, 0.0]])
        X = np.vstack([rng.normal(m, 0.2, size=(150, 3)) for m in means])
        model, _ = fit_prototypes(X, k=2, seed=seed)
        C = model.centroids[np.argsort(model.centroids[:, 0])]
        hits += np.all(np.linalg.norm(C - means, axis=1) < 0.1)
    assert hits >= 38


def test_kmeans_is_deterministic_per_seed():
    X = np.random.default_rng(1).normal(size=(100, 3))
    a = PrototypeKMeans(n_clusters=4, random_state=5).fit(X)
    b = PrototypeKMeans(n_clusters=4, random_state=5).fit(X)
    assert np.array_equal(a.cluster_centers_, b.cluster_centers_)


def test_nearest_centroid_examples():
    C = np.arange(30, dtype=float).reshape(10, 3)
    assert nearest_centroid(C[7:8], C)[0] == 7
    C = np.zeros((10, 2))
    C[2] = [1.0, 0.0]
    C[9] = [-1.0, 0.0]
    C[[0, 1, 3, 4, 5, 6, 7, 8]] = 50.0
    assert nearest_centroid(np.zeros((1, 2)), C)[0] == 2


def test_nearest_centroid_matches_brute_force():
    rng = np.random.default_rng(2)
    C = rng.normal(size=(12, 5))
    X = rng.normal(size=(500, 5))
    got = nearest_centroid(X, C)
    for x, g in zip(X, got):
        d = [float(np.sum((x - c) ** 2)) for c in C]
        assert g == d.index(min(d))


def test_prototype_file_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    model = PrototypeModel(rng.uniform(size=(7, SOCIAL_DIM)),
                           NormalizationStats(rng.uniform(1, 3, 4), rng.uniform(0, 9, 4)))
    path = tmp_path / "p.pro"
    model.save(path)
    back = PrototypeModel.load(path)
    assert np.array_equal(back.centroids, model.centroids)
    assert np.array_equal(back.norm.log_max, model.norm.log_max)
    assert np.array_equal(back.norm.fill_means, model.norm.fill_means)
    assert path.read_bytes()[:4] == b"PRO1"
    with pytest.raises(ValueError):
        from_bytes(to_bytes(model)[:-8])
