"""Glue from raw corpus to model-ready splits.

Random streams are derived from one run seed plus a role tag
(``seed_for(seed, "split")`` etc.), so each stage can be re-run alone.
"""
import zlib
from dataclasses import dataclass

import numpy as np

from .batching import encode_trees
from .data import split_corpus
from .prototypes import SocialFeaturizer, fit_prototypes
from .training import feature_standardize


def seed_for(seed, role):
    """Integer seed for the stream named ``role`` of run ``seed``."""
    return int(np.random.SeedSequence([int(seed), zlib.crc32(role.encode())]).generate_state(1)[0])


def training_users(train_trees):
    return sorted({u for t in train_trees for u in t.users})


def fit_prototype_space(train_trees, users, k, seed=0, max_iters=100):
    """Normalization and k-means fitted on the users of the training trees."""
    ids = training_users(train_trees)
    raw = users.subset(ids).raw
    featurizer = SocialFeaturizer().fit(raw)
    feats = featurizer.transform(raw)
    model, km = fit_prototypes(feats, k, seed_for(seed, "kmeans"), max_iters,
                               norm=featurizer.stats_)
    return model, km, ids


@dataclass
class PreparedCorpus:
    train: list
    val: list
    test: list
    features: dict       # user id -> social feature
    prototype_of: dict   # user id -> prototype id
    prototypes: object   # PrototypeModel
    scaler: object       # embedding StandardScaler


def split(trees, seed):
    return split_corpus(trees, (6, 1, 1), seed_for(seed, "split"))


def prepare(trees, users, embeddings, prototypes, seed=0):
    """Split, featurize, map users to prototypes and standardize embeddings
    with training-split statistics."""
    train, val, test = split(trees, seed)
    feats = prototypes.features(users.raw)
    protos = prototypes.map_users(feats)
    features = dict(zip(users.user_ids, feats))
    prototype_of = {u: int(p) for u, p in zip(users.user_ids, protos)}
    train_ids = sorted({t.content_id for t in train})
    scaler, (_,) = feature_standardize(np.stack([embeddings[c] for c in train_ids]))
    ids = list(embeddings)
    std = scaler.transform(np.stack([embeddings[c] for c in ids]))
    emb = dict(zip(ids, std))
    k = prototypes.k
    return PreparedCorpus(
        encode_trees(train, features, emb, prototype_of, k),
        encode_trees(val, features, emb, prototype_of, k),
        encode_trees(test, features, emb, prototype_of, k),
        features, prototype_of, prototypes, scaler)
