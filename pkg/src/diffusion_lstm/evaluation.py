"""Per-node AP/mAP under teacher forcing, and free-running tree generation
scored by depth MAE and histogram intersection."""
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernel as K
from .batching import iter_batches
from .data import DiffusionTree, TruncationCaps, format_edges
from .model import IMAGE_MEMORY, cell_step, head, init_root, tree_forward, _stacked
from .prototypes import SOCIAL_DIM, category_distribution, nearest_centroid


# --- average precision ------------------------------------------------------

def average_precision(scores, labels):
    """Non-interpolated ranked-retrieval AP: the mean, over positives, of the
    precision at each positive's rank. Equal scores keep input order.
    Returns NaN when there are no positives."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels) > 0
    n_pos = int(labels.sum())
    if n_pos == 0:
        return float("nan")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    ranks = np.flatnonzero(hits) + 1
    # fsum: correctly rounded, so the result does not depend on summation order
    return math.fsum(np.arange(1, n_pos + 1) / ranks) / n_pos


@dataclass
class APResult:
    per_class: np.ndarray
    ap_terminal: float
    map_prototypes: float
    map_all: float
    excluded: list
    n_nodes: int

    def as_dict(self):
        return dict(ap_terminal=self.ap_terminal, map_prototypes=self.map_prototypes,
                    map_all=self.map_all, excluded_classes=len(self.excluded),
                    n_nodes=self.n_nodes)


def _nanmean(x):
    x = np.asarray(x, dtype=float)
    x = x[~np.isnan(x)]
    return float(x.mean()) if x.size else float("nan")


def ap_result(scores, targets):
    """Per-class AP over ``(n_nodes, k + 1)`` scores; the last class is
    terminal. Classes without positives are excluded from the means."""
    scores = np.asarray(scores)
    targets = np.asarray(targets)
    per = np.array([average_precision(scores[:, u], targets[:, u])
                    for u in range(scores.shape[1])])
    excluded = [int(u) for u in np.flatnonzero(np.isnan(per))]
    return APResult(per, float(per[-1]), _nanmean(per[:-1]), _nanmean(per), excluded,
                    int(scores.shape[0]))


def predict_nodes(params, trees, batch_size=256):
    """Teacher-forced eval-mode scores for every node, concatenated in tree
    order. Returns ``(scores, targets)``."""
    scores, targets = [], []
    for batch in iter_batches(trees, batch_size):
        probs, _ = tree_forward(params, batch)
        scores.append(batch.to_tree_order(probs))
        if batch.targets is not None:
            targets.append(batch.to_tree_order(batch.targets))
    return np.concatenate(scores), (np.concatenate(targets) if targets else None)


def per_node_eval(params, trees):
    scores, targets = predict_nodes(params, trees)
    return ap_result(scores, targets)


def category_breakdown(scores, targets, n_categories):
    """AP recomputed separately for nodes whose user posts to one category
    (``"N=1"``) and to several (``"N>1"``). An empty group maps to None."""
    n_categories = np.asarray(n_categories)
    out = {}
    for name, mask in (("N=1", n_categories <= 1), ("N>1", n_categories > 1)):
        out[name] = ap_result(scores[mask], targets[mask]) if mask.any() else None
    return out


# --- generation ----------------------------------------------------------------

@dataclass
class GenerationConfig:
    terminal_threshold: float = 0.5
    prototype_threshold: float = 0.5
    caps: TruncationCaps = field(default_factory=TruncationCaps)

    def __post_init__(self):
        for name in ("terminal_threshold", "prototype_threshold"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError("{} must be in (0, 1), got {}".format(name, v))


def _inputs(variant, social, emb):
    if variant == "image_only":
        return emb
    if variant == "fc":
        return np.hstack([social, emb])
    return social


def _fc_probs(params, x):
    a = K.relu(K.affine(x, params["W1"], params["b1"]))
    a = K.relu(K.affine(a, params["W2"], params["b2"]))
    return K.sigmoid(K.affine(a, params["W3"], params["b3"]))


def generate_trees(params, root_features, embeddings, centroids, config=None,
                   tree_ids=None):
    """Grow one tree per ``(root feature, embedding)`` pair, all trees level
    by level in lockstep.

    A node is a leaf when its terminal probability reaches the terminal
    threshold; otherwise it gets one child per prototype whose probability
    reaches the prototype threshold, fed that prototype's centroid. Children
    that would break a depth, size or width cap are not created. Node labels
    of the returned trees are prototype ids (the root's is its nearest
    centroid).
    """
    config = config or GenerationConfig()
    caps = config.caps
    root_features = np.atleast_2d(np.asarray(root_features, dtype=np.float64))
    embeddings = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    centroids = np.asarray(centroids, dtype=np.float64)
    B = len(root_features)
    k = params.k
    if len(embeddings) != B:
        raise ValueError("need one embedding per root")
    if centroids.shape != (k, SOCIAL_DIM):
        raise K.ShapeError("centroids {} do not match model k={}".format(centroids.shape, k))
    labels = [[int(p)] for p in nearest_centroid(root_features, centroids)]
    parents = [[-1] for _ in range(B)]
    lstm = params.variant != "fc"
    stack = _stacked(params) if lstm else None
    if lstm:
        if params.variant in IMAGE_MEMORY:
            c, _ = init_root(embeddings, params)
        else:
            c = np.zeros((B, params.hidden))
        h = np.zeros((B, params.hidden))
    tree = np.arange(B)          # frontier node -> tree
    node = np.zeros(B, dtype=int)  # frontier node -> index within its tree
    social = root_features
    sizes = np.ones(B, dtype=int)
    for depth in range(caps.depth + 1):
        x = _inputs(params.variant, social, embeddings[tree])
        if lstm:
            c, h, _ = cell_step(x, c, h, params, stack)
            probs, _ = head(h, params)
        else:
            probs = _fc_probs(params, x)
        if depth == caps.depth:
            break
        expand = probs[:, k] < config.terminal_threshold
        cand = (probs[:, :k] >= config.prototype_threshold) & expand[:, None]
        src, proto = np.nonzero(cand)
        if src.size == 0:
            break
        t_of = tree[src]
        # rank of each candidate among its tree's candidates, in node then class order
        first = np.searchsorted(t_of, t_of, side="left")
        rank = np.arange(len(t_of)) - first
        budget = np.minimum(caps.width, caps.size - sizes[t_of])
        keep = rank < budget
        src, proto, t_of = src[keep], proto[keep], t_of[keep]
        if src.size == 0:
            break
        new_node = np.empty(len(src), dtype=int)
        for j, (s, p, t) in enumerate(zip(src, proto, t_of)):
            new_node[j] = len(labels[t])
            labels[t].append(int(p))
            parents[t].append(int(node[s]))
        np.add.at(sizes, t_of, 1)
        if lstm:
            c, h = c[src], h[src]
        tree, node = t_of, new_node
        social = centroids[proto]
    ids = tree_ids if tree_ids is not None else ["g{:06d}".format(i) for i in range(B)]
    return [DiffusionTree(str(ids[i]), str(ids[i]), labels[i], np.array(parents[i]))
            for i in range(B)]


def generate_tree(params, root_feature, embedding, centroids, config=None, tree_id="g0"):
    return generate_trees(params, root_feature, embedding, centroids, config, [tree_id])[0]


def format_generated(trees):
    """Edge-file text for generated trees. Prototype ids repeat within a tree,
    so each node is written as ``<prototype>@<node index>``."""
    return format_edges(trees, lambda t, i: "{}@{}".format(t.users[i], i))


# --- tree scores -------------------------------------------------------------

def depth_mae(generated, reference):
    """MAE between generated and reference depths, computed within each
    reference-depth bucket and then averaged over the non-empty buckets.

    Both arguments are mappings ``tree_id -> depth`` or lists of trees, paired
    by tree id.
    """
    gen = _depths(generated)
    ref = _depths(reference)
    if set(gen) != set(ref):
        missing = sorted(set(gen) ^ set(ref))
        raise ValueError("unpaired trees: {}".format(missing[:5]))
    if not ref:
        raise ValueError("depth_mae of an empty corpus")
    buckets = {}
    for tid, d in ref.items():
        buckets.setdefault(d, []).append(abs(gen[tid] - d))
    return float(np.mean([np.mean(v) for _, v in sorted(buckets.items())]))


def _depths(trees):
    if isinstance(trees, dict):
        return {k: int(v) for k, v in trees.items()}
    return {t.tree_id: t.max_depth for t in trees}


def mean_distribution(dists):
    """Average of the rows of ``dists`` renormalized to sum 1, or None if
    there are no rows."""
    dists = np.atleast_2d(np.asarray(dists, dtype=np.float64))
    if dists.shape[0] == 0 or dists.size == 0:
        return None
    m = dists.mean(axis=0)
    s = m.sum()
    return m / s if s > 0 else None


def histogram_intersection(d1, d2):
    return float(np.minimum(np.asarray(d1), np.asarray(d2)).sum())


@dataclass
class HIResult:
    hi: float
    n_scored: int
    n_skipped: int


def corpus_hi(generated, reference):
    """Mean HI over paired distributions; pairs where either side is None
    (no non-root nodes) are skipped and counted."""
    scores = [histogram_intersection(g, r) for g, r in zip(generated, reference)
              if g is not None and r is not None]
    skipped = len(generated) - len(scores)
    return HIResult(float(np.mean(scores)) if scores else float("nan"), len(scores), skipped)


def generated_distribution(tree, proto_dists):
    """Mean category distribution over a generated tree's non-root nodes."""
    if tree.size <= 1:
        return None
    return mean_distribution(proto_dists[np.asarray(tree.users[1:], dtype=int)])


def reference_distribution(encoded):
    """Mean category distribution over a real tree's non-root users."""
    if encoded.size <= 1:
        return None
    return mean_distribution(category_distribution(encoded.social[1:]))


@dataclass
class TreeScore:
    depth_mae: float
    hi: float
    n_trees: int
    hi_scored: int
    hi_skipped: int

    def as_dict(self):
        return dict(depth_mae=self.depth_mae, hi=self.hi, n_trees=self.n_trees,
                    hi_scored=self.hi_scored, hi_skipped=self.hi_skipped)


def score_trees(generated, encoded, proto_dists):
    """Compare generated trees to the ground-truth encoded trees (same order)."""
    ref_depth = {e.tree.tree_id: e.tree.max_depth for e in encoded}
    gen_depth = {e.tree.tree_id: g.max_depth for g, e in zip(generated, encoded)}
    hi = corpus_hi([generated_distribution(g, proto_dists) for g in generated],
                   [reference_distribution(e) for e in encoded])
    return TreeScore(depth_mae(gen_depth, ref_depth), hi.hi, len(encoded), hi.n_scored,
                     hi.n_skipped)


def generate_for(params, encoded, centroids, config):
    return generate_trees(params, np.stack([e.social[0] for e in encoded]),
                          np.stack([e.embedding for e in encoded]), centroids, config,
                          [e.tree.tree_id for e in encoded])


DEFAULT_GRID = tuple(np.round(np.arange(0.05, 0.951, 0.05), 2))


def calibrate_thresholds(params, val_trees, centroids, grid=DEFAULT_GRID,
                         terminal_threshold=0.5, caps=TruncationCaps()):
    """Pick the scalar prototype threshold minimizing validation depth MAE;
    ties go to the larger threshold. Returns ``(config, {threshold: mae})``."""
    if not val_trees:
        raise ValueError("calibration needs validation trees")
    if len(grid) == 0:
        raise ValueError("empty threshold grid")
    ref = {e.tree.tree_id: e.tree.max_depth for e in val_trees}
    scores = {}
    for thr in grid:
        cfg = GenerationConfig(terminal_threshold, float(thr), caps)
        gen = generate_for(params, val_trees, centroids, cfg)
        scores[float(thr)] = depth_mae({g.tree_id: g.max_depth for g in gen}, ref)
    best = min(scores, key=lambda t: (scores[t], -t))
    return GenerationConfig(terminal_threshold, best, caps), scores


def sample_chance_trees(train_trees, targets, rng):
    """Chance baseline: for each target tree, a uniformly drawn training tree
    (shape and node prototypes) carrying the target's id."""
    picks = rng.integers(len(train_trees), size=len(targets))
    return [DiffusionTree(e.tree.tree_id, e.tree.content_id,
                          list(train_trees[i].prototypes), train_trees[i].tree.parents)
            for i, e in zip(picks, targets)]


def chance_score(train_trees, test_trees, proto_dists, rng):
    return score_trees(sample_chance_trees(train_trees, test_trees, rng), test_trees,
                       proto_dists)
