"""Synthetic share cascades with history-dependent branching.

Each tree has a root prototype ``r`` and a content topic ``z``. A node of
prototype ``p`` independently spawns at most one child of every prototype
``u`` with probability ``spawn[r, z, p, u]``. Because the table is indexed by
the root and the topic as well as the parent, a predictor that only sees the
current node cannot be optimal; one that remembers the path can.

Users are drawn from per-prototype populations (distinct users within a
tree, since the edge format keys nodes by user id) and content embeddings
are noisy copies of a per-topic center.
"""
from dataclasses import dataclass, field

import numpy as np

from .data import (N_ACTIVITY, N_CATEGORIES, DiffusionTree, TruncationCaps,
                   UserTable)


@dataclass
class SyntheticWorld:
    k: int
    n_topics: int
    spawn: np.ndarray             # (k root, n_topics, k parent, k child)
    activity_log_mean: np.ndarray  # (k, 4)
    category_probs: np.ndarray    # (k, 38)
    topic_centers: np.ndarray     # (n_topics, emb_dim)
    users_per_prototype: int = 160
    activity_noise: float = 0.25
    embedding_noise: float = 0.5
    missing_rate: float = 0.005
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.spawn.shape != (self.k, self.n_topics, self.k, self.k):
            raise ValueError("spawn table has shape {}, expected {}".format(
                self.spawn.shape, (self.k, self.n_topics, self.k, self.k)))
        if np.any(self.spawn < 0) or np.any(self.spawn > 1):
            raise ValueError("spawn probabilities must lie in [0, 1]")

    @property
    def emb_dim(self):
        return self.topic_centers.shape[1]

    def transition(self, root, topic):
        """``(k, k + 1)`` table: child-spawn probabilities per parent prototype,
        last column the probability of spawning nothing."""
        s = self.spawn[root, topic]
        return np.hstack([s, np.prod(1.0 - s, axis=1, keepdims=True)])

    def expected_size(self):
        """Mean tree size without truncation, averaged over uniform root
        prototype and topic (multi-type branching process mean)."""
        total = 0.0
        eye = np.eye(self.k)
        for r in range(self.k):
            for z in range(self.n_topics):
                M = self.spawn[r, z]
                if np.max(np.abs(np.linalg.eigvals(M))) >= 1:
                    return float("inf")
                total += np.linalg.solve(eye - M, np.ones(self.k))[r]
        return total / (self.k * self.n_topics)


def make_world(k=10, n_topics=4, branching=0.75, heterogeneity=0.8, concentration=0.9,
               n_preferred=2, emb_dim=32, users_per_prototype=160, max_radius=0.8,
               seed=0):
    """Random world whose nodes spawn ``branching`` children on average.

    ``heterogeneity`` splits (root, topic, parent) cells into hot ones with mean
    ``branching * (1 + h)`` children and cold ones with ``branching * (1 - h)``.
    A fraction ``concentration`` of a cell's mass goes to ``n_preferred``
    randomly chosen child prototypes, the rest is spread evenly. Any
    (root, topic) slice whose mean matrix has spectral radius above
    ``max_radius`` is scaled down to it.
    """
    if k < 2 or n_topics < 1:
        raise ValueError("need k >= 2 and n_topics >= 1")
    if not 0 <= heterogeneity < 1 or not 0 <= concentration <= 1:
        raise ValueError("heterogeneity must be in [0, 1), concentration in [0, 1]")
    rng = np.random.default_rng(seed)
    n_preferred = min(n_preferred, k)
    hot = rng.random((k, n_topics, k)) < 0.5
    mass = branching * np.where(hot, 1.0 + heterogeneity, 1.0 - heterogeneity)
    spawn = np.empty((k, n_topics, k, k))
    spawn[...] = (mass * (1.0 - concentration) / k)[..., None]
    for r in range(k):
        for z in range(n_topics):
            for p in range(k):
                pref = rng.choice(k, size=n_preferred, replace=False)
                spawn[r, z, p, pref] += mass[r, z, p] * concentration / n_preferred
    np.clip(spawn, 0.0, 0.95, out=spawn)
    if heterogeneity > 0:
        for r in range(k):
            for z in range(n_topics):
                rho = np.max(np.abs(np.linalg.eigvals(spawn[r, z])))
                if rho > max_radius:
                    spawn[r, z] *= max_radius / rho

    activity = rng.uniform(np.log(5.0), np.log(5000.0), size=(k, N_ACTIVITY))
    cats = np.zeros((k, N_CATEGORIES))
    order = rng.permutation(N_CATEGORIES)
    for p in range(k):
        if p % 2 == 0:
            # single-category posters
            cats[p, order[p % N_CATEGORIES]] = 1.0
        else:
            picks = [order[(p + j) % N_CATEGORIES] for j in range(3)]
            cats[p, picks] = rng.dirichlet(np.full(3, 2.0))
    topics = rng.normal(size=(n_topics, emb_dim))
    return SyntheticWorld(
        k, n_topics, spawn, activity, cats, topics,
        users_per_prototype=users_per_prototype, seed=seed,
        params=dict(k=k, n_topics=n_topics, branching=branching,
                    heterogeneity=heterogeneity, concentration=concentration,
                    n_preferred=n_preferred, emb_dim=emb_dim,
                    users_per_prototype=users_per_prototype,
                    max_radius=max_radius, seed=seed))


@dataclass
class SyntheticCorpus:
    trees: list
    users: UserTable
    embeddings: dict
    topics: np.ndarray            # per tree
    user_prototype: dict          # user id -> generating prototype

    def __iter__(self):
        return iter((self.trees, self.users, self.embeddings))


def _make_users(world, rng):
    n = world.users_per_prototype
    ids, act, cats, protos = [], [], [], []
    for p in range(world.k):
        for j in range(n):
            ids.append("u{:03d}_{:04d}".format(p, j))
            protos.append(p)
        mu = world.activity_log_mean[p]
        counts = np.round(np.exp(mu + world.activity_noise * rng.normal(size=(n, N_ACTIVITY))))
        missing = rng.random((n, N_ACTIVITY)) < world.missing_rate
        act.append(np.where(missing, np.nan, counts))
        n_images = 20 + rng.poisson(60, size=n)
        cats.append(np.array([rng.multinomial(m, world.category_probs[p]) for m in n_images]))
    users = UserTable(ids, np.vstack(act), np.vstack(cats))
    return users, dict(zip(ids, protos))


def generate_synthetic(world, n_trees, caps=TruncationCaps(), seed=None):
    """Sample ``n_trees`` cascades, their users and content embeddings."""
    if n_trees < 0:
        raise ValueError("n_trees must be non-negative")
    rng = np.random.default_rng(world.seed if seed is None else seed)
    users, user_proto = _make_users(world, rng)
    pool = world.users_per_prototype
    k = world.k
    trees, topics, embeddings = [], [], {}
    for t in range(n_trees):
        r = int(rng.integers(k))
        z = int(rng.integers(world.n_topics))
        table = world.spawn[r, z]
        used = [set() for _ in range(k)]

        def draw_user(p):
            while True:
                j = int(rng.integers(pool))
                if j not in used[p]:
                    used[p].add(j)
                    return "u{:03d}_{:04d}".format(p, j)

        node_proto = [r]
        users_t = [draw_user(r)]
        parents = [-1]
        level = [0]
        depth = 0
        while level and depth < caps.depth:
            nxt = []
            for node in level:
                spawned = np.flatnonzero(rng.random(k) < table[node_proto[node]])
                for u in spawned:
                    if len(users_t) >= caps.size or len(nxt) >= caps.width:
                        break
                    if len(used[u]) >= pool:
                        continue
                    nxt.append(len(users_t))
                    node_proto.append(int(u))
                    users_t.append(draw_user(int(u)))
                    parents.append(node)
            level = nxt
            depth += 1
        tid = "t{:06d}".format(t)
        cid = "c{:06d}".format(t)
        trees.append(DiffusionTree(tid, cid, users_t, np.array(parents)))
        topics.append(z)
        embeddings[cid] = world.topic_centers[z] + world.embedding_noise * rng.normal(
            size=world.emb_dim)
    return SyntheticCorpus(trees, users, embeddings, np.array(topics, dtype=int), user_proto)
