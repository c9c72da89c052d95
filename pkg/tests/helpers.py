"""Small random fixtures shared by the model, training and evaluation tests."""
import numpy as np

from diffusion_lstm.batching import EncodedTree
from diffusion_lstm.data import DiffusionTree, node_targets
from diffusion_lstm.prototypes import SOCIAL_DIM


def random_tree(rng, n, tree_id="t", path=False):
    parents = np.array([-1] + [i - 1 if path else int(rng.integers(i)) for i in range(1, n)])
    # BFS order: sort nodes by depth, stable
    depth = np.zeros(n, dtype=int)
    for i in range(1, n):
        depth[i] = depth[parents[i]] + 1
    order = np.argsort(depth, kind="stable")
    new = np.empty(n, dtype=int)
    new[order] = np.arange(n)
    par = np.array([-1 if parents[o] < 0 else new[parents[o]] for o in order])
    users = ["{}_u{}".format(tree_id, i) for i in range(n)]
    return DiffusionTree(tree_id, tree_id, users, par)


def random_encoded(rng, n, k=4, emb_dim=5, tree_id="t", path=False):
    tree = random_tree(rng, n, tree_id, path)
    protos = {u: int(rng.integers(k)) for u in tree.users}
    social = rng.uniform(0, 1, size=(n, SOCIAL_DIM))
    emb = rng.normal(size=emb_dim)
    return EncodedTree(tree, social, emb, node_targets(tree, protos, k),
                       np.array([protos[u] for u in tree.users]))


def random_forest(rng, n_trees, max_nodes=8, k=4, emb_dim=5):
    return [random_encoded(rng, int(rng.integers(1, max_nodes + 1)), k, emb_dim,
                           "t{}".format(j)) for j in range(n_trees)]
