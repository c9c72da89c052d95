"""Per-node model inputs for diffusion trees, and level-major tree batches.

A batch concatenates the nodes of several trees and reorders them by depth
so every tree level is one contiguous slice; the tree recurrences then run
one vectorized step per depth.
"""
from dataclasses import dataclass

import numpy as np

from .data import node_targets


@dataclass
class EncodedTree:
    tree: object            # DiffusionTree
    social: np.ndarray      # (n, 42) social features per node
    embedding: np.ndarray   # (D,) content embedding
    targets: np.ndarray     # (n, k + 1) 0/1, or None when unknown
    prototypes: np.ndarray  # (n,) prototype id per node, or None

    @property
    def size(self):
        return self.tree.size

    @property
    def parents(self):
        return self.tree.parents

    @property
    def depth(self):
        return self.tree.depth


def encode_trees(trees, feature_of, embedding_of, prototype_of=None, k=None):
    """Attach inputs (and targets, when prototypes are given) to trees.

    ``feature_of`` maps user id -> social feature, ``embedding_of`` maps
    content id -> embedding, ``prototype_of`` maps user id -> prototype id.
    """
    out = []
    for t in trees:
        social = np.array([feature_of[u] for u in t.users], dtype=np.float64)
        emb = np.asarray(embedding_of[t.content_id], dtype=np.float64)
        targets = protos = None
        if prototype_of is not None:
            targets = node_targets(t, prototype_of, k)
            protos = np.array([prototype_of[u] for u in t.users], dtype=int)
        out.append(EncodedTree(t, social, emb, targets, protos))
    return out


class TreeBatch:
    """Level-major concatenation of encoded trees.

    ``social``, ``parent``, ``tree_of`` and ``targets`` are in batch order;
    ``levels`` lists one slice per depth. ``to_tree_order`` maps a batch-order
    array back to the trees' own concatenated node order.
    """

    def __init__(self, trees):
        if not trees:
            raise ValueError("empty batch")
        self.trees = list(trees)
        sizes = np.array([t.size for t in trees])
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        depth = np.concatenate([t.depth for t in trees])
        tree_of = np.repeat(np.arange(len(trees)), sizes)
        parent = np.concatenate([np.where(t.parents >= 0, t.parents + o, -1)
                                 for t, o in zip(trees, offsets)])
        perm = np.argsort(depth, kind="stable")
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        self.perm = perm
        self.inverse = inv
        self.offsets = offsets
        self.sizes = sizes
        self.n_nodes = int(sizes.sum())
        self.tree_of = tree_of[perm]
        self.parent = np.where(parent[perm] >= 0, inv[np.maximum(parent[perm], 0)], -1)
        d = depth[perm]
        bounds = np.searchsorted(d, np.arange(d[-1] + 2))
        self.levels = [slice(int(bounds[i]), int(bounds[i + 1])) for i in range(d[-1] + 1)]
        self.social = np.concatenate([t.social for t in trees])[perm]
        self.embedding = np.stack([t.embedding for t in trees])
        if all(t.targets is not None for t in trees):
            self.targets = np.concatenate([t.targets for t in trees])[perm].astype(np.float64)
        else:
            self.targets = None

    def to_tree_order(self, arr):
        return arr[self.inverse]

    def split_by_tree(self, arr):
        """Batch-order rows -> list of per-tree arrays in each tree's node order."""
        arr = self.to_tree_order(arr)
        return [arr[o:o + n] for o, n in zip(self.offsets, self.sizes)]


def iter_batches(trees, batch_size, rng=None):
    """Yield TreeBatch objects; shuffles tree order when ``rng`` is given."""
    idx = np.arange(len(trees))
    if rng is not None:
        idx = rng.permutation(len(trees))
    for s in range(0, len(idx), batch_size):
        yield TreeBatch([trees[i] for i in idx[s:s + batch_size]])
