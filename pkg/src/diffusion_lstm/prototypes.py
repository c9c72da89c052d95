"""Social features and the k-prototype user space.

A user's 42-D social feature is four log-scaled activity counts followed by
the 38-category posting distribution divided by 4. Users are clustered with
Lloyd's k-means; any user, seen or unseen, maps to its nearest centroid.
"""
import struct
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_features, check_random_state_seed
from .data import N_ACTIVITY, N_CATEGORIES

SOCIAL_DIM = N_ACTIVITY + N_CATEGORIES
CATEGORY_SCALE = 4.0


@dataclass(frozen=True)
class NormalizationStats:
    log_max: np.ndarray     # (4,) max of log1p(count) over training users
    fill_means: np.ndarray  # (4,) raw-count means used for missing values


class SocialFeaturizer(TransformerMixin, BaseEstimator):
    """Raw ``(n, 42)`` user counts -> normalized social features.

    Columns 0-3 are the activity counts (NaN = missing), 4-41 category
    counts. Activity becomes ``log1p(count) / max`` clamped to [0, 1], the
    categories become proportions divided by 4 (uniform when a user never
    posted).
    """

    def fit(self, X, y=None):
        X = check_features(X, SOCIAL_DIM, allow_nan=True)
        act = X[:, :N_ACTIVITY]
        present = ~np.isnan(act)
        n_present = present.sum(axis=0)
        means = np.where(present, act, 0.0).sum(axis=0) / np.maximum(n_present, 1)
        filled = np.where(np.isnan(act), means, act)
        log_max = np.log1p(filled).max(axis=0)
        log_max = np.where(log_max > 0, log_max, 1.0)
        self.stats_ = NormalizationStats(log_max, means)
        return self

    def transform(self, X):
        check_is_fitted(self, "stats_")
        return build_features(check_features(X, SOCIAL_DIM, allow_nan=True), self.stats_)


def build_features(X, stats):
    """Featurize raw counts with fitted :class:`NormalizationStats`."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    act = X[:, :N_ACTIVITY]
    act = np.where(np.isnan(act), stats.fill_means, act)
    act = np.clip(np.log1p(act) / stats.log_max, 0.0, 1.0)
    cats = np.nan_to_num(X[:, N_ACTIVITY:], nan=0.0)
    tot = cats.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        props = np.where(tot > 0, cats / np.where(tot > 0, tot, 1.0), 1.0 / N_CATEGORIES)
    return np.hstack([act, props / CATEGORY_SCALE])


def category_distribution(features):
    """Recover the normalized 38-category distribution from social features."""
    cats = np.atleast_2d(features)[:, N_ACTIVITY:] * CATEGORY_SCALE
    tot = cats.sum(axis=1, keepdims=True)
    return np.where(tot > 0, cats / np.where(tot > 0, tot, 1.0), 1.0 / N_CATEGORIES)


def _sq_dists(X, C, chunk=4096):
    out = np.empty((len(X), len(C)))
    for s in range(0, len(X), chunk):
        d = X[s:s + chunk, None, :] - C[None, :, :]
        out[s:s + chunk] = np.einsum("ijk,ijk->ij", d, d)
    return out


def nearest_centroid(X, centroids):
    """Index of the nearest centroid per row; ties go to the lowest index."""
    return np.argmin(_sq_dists(np.atleast_2d(X), centroids), axis=1)


class PrototypeKMeans(ClusterMixin, TransformerMixin, BaseEstimator):
    """Lloyd's k-means with k-means++ seeding.

    ``objective_history_`` holds the within-cluster sum of squares after each
    assignment step of the kept run; it is non-increasing. An empty cluster is
    re-seeded at the point farthest from its assigned centroid. With
    ``n_init > 1`` the run with the lowest final objective is kept.
    """

    def __init__(self, n_clusters=100, max_iter=100, n_init=10, random_state=0):
        self.n_clusters = n_clusters
        self.max_iter = max_iter
        self.n_init = n_init
        self.random_state = random_state

    def _init_centroids(self, X, rng):
        k = self.n_clusters
        centers = [X[rng.integers(len(X))]]
        d2 = _sq_dists(X, centers[0][None])[:, 0]
        for _ in range(1, k):
            total = d2.sum()
            if total <= 0:
                break
            i = rng.choice(len(X), p=d2 / total)
            centers.append(X[i])
            d2 = np.minimum(d2, _sq_dists(X, X[i][None])[:, 0])
        return np.array(centers)

    def fit(self, X, y=None):
        X = check_features(X)
        k = self.n_clusters
        if k < 2:
            raise ValueError("n_clusters must be >= 2, got {}".format(k))
        n_distinct = len(np.unique(X, axis=0))
        if n_distinct < k:
            raise ValueError("need at least {} distinct points, got {}".format(k, n_distinct))
        rng = np.random.default_rng(check_random_state_seed(self.random_state))
        best = None
        for _ in range(max(1, self.n_init)):
            run = self._lloyd(X, self._init_centroids(X, rng))
            if best is None or run[2] < best[2]:
                best = run
        self.cluster_centers_, self.labels_, self.inertia_, \
            self.objective_history_, self.n_iter_ = best
        return self

    def _lloyd(self, X, C):
        labels = None
        history = []
        n_iter = 0
        for n_iter in range(1, self.max_iter + 1):
            d = _sq_dists(X, C)
            new = np.argmin(d, axis=1)
            history.append(float(d[np.arange(len(X)), new].sum()))
            if labels is not None and np.array_equal(new, labels):
                break
            labels = new
            C = self._update(X, labels, d)
        d = _sq_dists(X, C)
        labels = np.argmin(d, axis=1)
        return C, labels, float(d[np.arange(len(X)), labels].sum()), history, n_iter

    def _update(self, X, labels, d):
        k = self.n_clusters
        counts = np.bincount(labels, minlength=k)
        C = np.zeros((k, X.shape[1]))
        np.add.at(C, labels, X)
        own = d[np.arange(len(X)), labels].copy()
        for j in range(k):
            if counts[j]:
                C[j] /= counts[j]
                continue
            # re-seed at the worst-served point, then take it out of its cluster
            far = int(np.argmax(own))
            C[j] = X[far]
            own[far] = -1.0
        return C

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        return nearest_centroid(check_features(X, self.cluster_centers_.shape[1]),
                                self.cluster_centers_)

    def transform(self, X):
        check_is_fitted(self, "cluster_centers_")
        return np.sqrt(_sq_dists(check_features(X, self.cluster_centers_.shape[1]),
                                 self.cluster_centers_))


@dataclass
class PrototypeModel:
    """Fitted centroids plus the normalization used to build features."""
    centroids: np.ndarray
    norm: NormalizationStats

    @property
    def k(self):
        return len(self.centroids)

    def features(self, raw):
        return build_features(raw, self.norm)

    def map_users(self, features):
        return nearest_centroid(features, self.centroids)

    def map_user(self, feature):
        return int(self.map_users(np.asarray(feature)[None])[0])

    def category_distributions(self):
        return category_distribution(self.centroids)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(to_bytes(self))

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return from_bytes(fh.read())


def fit_prototypes(features, k=100, seed=0, max_iters=100, norm=None, n_init=10):
    km = PrototypeKMeans(n_clusters=k, max_iter=max_iters, n_init=n_init,
                         random_state=seed).fit(features)
    if norm is None:
        norm = NormalizationStats(np.ones(N_ACTIVITY), np.zeros(N_ACTIVITY))
    return PrototypeModel(km.cluster_centers_, norm), km


PRO_MAGIC = b"PRO1"


def to_bytes(model):
    k, dim = model.centroids.shape
    return (PRO_MAGIC + struct.pack("<II", k, dim)
            + np.ascontiguousarray(model.centroids, dtype="<f8").tobytes()
            + np.asarray(model.norm.log_max, dtype="<f8").tobytes()
            + np.asarray(model.norm.fill_means, dtype="<f8").tobytes())


def from_bytes(data):
    if data[:4] != PRO_MAGIC:
        raise ValueError("not a PRO1 prototype file")
    k, dim = struct.unpack_from("<II", data, 4)
    expected = 12 + 8 * (k * dim + 2 * N_ACTIVITY)
    if len(data) != expected:
        raise ValueError("PRO1 file has {} bytes, expected {}".format(len(data), expected))
    vals = np.frombuffer(data, dtype="<f8", offset=12).astype(np.float64)
    C = vals[:k * dim].reshape(k, dim)
    log_max = vals[k * dim:k * dim + N_ACTIVITY]
    means = vals[k * dim + N_ACTIVITY:]
    return PrototypeModel(C, NormalizationStats(log_max, means))
