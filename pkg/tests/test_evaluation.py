import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffusion_lstm.data import DiffusionTree, TruncationCaps
from diffusion_lstm.evaluation import (GenerationConfig, ap_result, average_precision,
                                       calibrate_thresholds, category_breakdown, corpus_hi,
                                       depth_mae, format_generated, generate_tree,
                                       generate_trees, histogram_intersection,
                                       mean_distribution, sample_chance_trees)
from diffusion_lstm.model import init_params

from .helpers import random_forest
from .oracles import brute_force_ap


def test_ap_worked_example():
    assert average_precision([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx(5 / 6, abs=1e-9)


def test_perfect_scores_give_ap_one_and_empty_classes_are_excluded():
    t = np.array([[1, 0, 0], [0, 0, 1], [1, 0, 1]])
    res = ap_result(t.astype(float), t)
    assert res.per_class[0] == 1.0 and res.per_class[2] == 1.0
    assert np.isnan(res.per_class[1]) and res.excluded == [1]
    assert res.map_all == 1.0 and res.ap_terminal == 1.0 and res.n_nodes == 3


def test_ap_matches_brute_force_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(1, 51))
        # coarse scores so that ties are common
        scores = rng.integers(0, 6, size=n) / 5.0
        labels = rng.integers(0, 2, size=n)
        got, ref = average_precision(scores, labels), brute_force_ap(list(scores), list(labels))
        assert (np.isnan(got) and np.isnan(ref)) or got == ref


def test_breakdown_is_not_the_joint_ap():
    scores = np.array([[0.9], [0.1], [0.8], [0.7]])
    targets = np.array([[0], [1], [1], [0]])
    joint = ap_result(scores, targets).map_all
    parts = category_breakdown(scores, targets, [1, 1, 3, 3])
    assert joint == pytest.approx(0.5)
    assert parts["N=1"].map_all == pytest.approx(0.5) and parts["N>1"].map_all == 1.0
    assert np.mean([parts["N=1"].map_all, parts["N>1"].map_all]) != joint


def test_breakdown_reports_an_empty_group():
    s = np.array([[0.2], [0.4]])
    parts = category_breakdown(s, np.array([[1], [0]]), [1, 1])
    assert parts["N>1"] is None and parts["N=1"].n_nodes == 2


def test_depth_mae_examples():
    ref = {"a": 1, "b": 1, "c": 2}
    assert depth_mae({"a": 2, "b": 4, "c": 2}, ref) == 1.0
    assert depth_mae(ref, ref) == 0.0
    with pytest.raises(ValueError):
        depth_mae({"a": 1}, ref)


def test_histogram_intersection_examples():
    d1 = np.zeros(38)
    d1[:2] = 0.5
    d2 = np.zeros(38)
    d2[:3] = [0.25, 0.25, 0.5]
    assert histogram_intersection(d1, d2) == 0.5
    assert histogram_intersection(d1, d1) == 1.0
    assert histogram_intersection(np.eye(38)[0], np.eye(38)[1]) == 0.0
    assert corpus_hi([d1, None], [d2, d2]).n_skipped == 1


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_hi_properties(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.dirichlet(np.ones(6)), rng.dirichlet(np.ones(6))
    h = histogram_intersection(a, b)
    assert h == histogram_intersection(b, a) and 0.0 <= h <= 1.0
    assert histogram_intersection(a, a) == pytest.approx(1.0)
    assert mean_distribution(np.vstack([a, b])).sum() == pytest.approx(1.0)


def _biased_params(terminal, proto, k=4, emb_dim=3, hidden=4, variant="full"):
    p = init_params(variant, hidden, 3, emb_dim, k, seed=0)
    last = "W3" if variant == "fc" else "W2"
    p[last] = 0.0
    p["b" + last[1]] = np.r_[np.full(k, proto), terminal]
    return p


def test_terminal_always_model_gives_single_nodes():
    p = _biased_params(50.0, -50.0)
    centroids = np.random.default_rng(0).uniform(size=(4, 42))
    t = generate_tree(p, centroids[2], np.ones(3), centroids)
    assert t.size == 1 and t.users == [2]
    assert format_generated([t]).count("\n") == 1


def test_generation_is_deterministic():
    rng = np.random.default_rng(1)
    p = init_params("full", 6, 4, 3, 4, seed=2)
    centroids = rng.uniform(size=(4, 42))
    roots, embs = rng.uniform(size=(20, 42)), rng.normal(size=(20, 3))
    cfg = GenerationConfig(0.5, 0.3)
    a = generate_trees(p, roots, embs, centroids, cfg)
    b = generate_trees(p, roots, embs, centroids, cfg)
    assert [(t.users, list(t.parents)) for t in a] == [(t.users, list(t.parents)) for t in b]


def test_batched_generation_equals_one_tree_at_a_time():
    rng = np.random.default_rng(3)
    p = init_params("full", 6, 4, 3, 4, seed=1)
    centroids = rng.uniform(size=(4, 42))
    roots, embs = rng.uniform(size=(10, 42)), rng.normal(size=(10, 3))
    cfg = GenerationConfig(0.5, 0.35)
    batch = generate_trees(p, roots, embs, centroids, cfg)
    for j, t in enumerate(batch):
        one = generate_tree(p, roots[j], embs[j], centroids, cfg)
        assert one.users == t.users and np.array_equal(one.parents, t.parents)


@pytest.mark.parametrize("variant", ["full", "fc"])
def test_always_branch_model_respects_caps(variant):
    k = 12
    p = _biased_params(-50.0, 50.0, k=k, variant=variant)
    rng = np.random.default_rng(0)
    centroids = rng.uniform(size=(k, 42))
    caps = TruncationCaps()
    trees = generate_trees(p, rng.uniform(size=(200, 42)), rng.normal(size=(200, 3)),
                           centroids, GenerationConfig(caps=caps))
    assert all(caps.admits(t) for t in trees)
    assert max(t.size for t in trees) == caps.size


def test_calibration_grid_of_one_and_tie_rule():
    rng = np.random.default_rng(0)
    val = random_forest(rng, 6, max_nodes=5, k=3, emb_dim=3)
    p = _biased_params(50.0, -50.0, k=3)
    centroids = rng.uniform(size=(3, 42))
    cfg, _ = calibrate_thresholds(p, val, centroids, grid=(0.3,))
    assert cfg.prototype_threshold == 0.3
    # a terminal-always model ties on every threshold: the largest wins
    cfg, scores = calibrate_thresholds(p, val, centroids)
    assert len(set(scores.values())) == 1 and cfg.prototype_threshold == 0.95


def test_calibrated_threshold_is_grid_optimal():
    rng = np.random.default_rng(2)
    val = random_forest(rng, 20, max_nodes=8, k=3, emb_dim=3)
    p = init_params("full", 6, 4, 3, 3, seed=4)
    cfg, scores = calibrate_thresholds(p, val, rng.uniform(size=(3, 42)))
    assert scores[cfg.prototype_threshold] == min(scores.values())


def test_generation_config_rejects_bounds():
    with pytest.raises(ValueError):
        GenerationConfig(prototype_threshold=1.0)
    with pytest.raises(ValueError):
        GenerationConfig(terminal_threshold=0.0)


def test_chance_sampler_draws_training_shapes():
    rng = np.random.default_rng(0)
    train = random_forest(rng, 5, max_nodes=6)
    test = random_forest(rng, 30, max_nodes=6)
    out = sample_chance_trees(train, test, np.random.default_rng(1))
    shapes = {tuple(t.tree.parents) for t in train}
    assert [t.tree_id for t in out] == [t.tree.tree_id for t in test]
    assert all(tuple(t.parents) in shapes for t in out)
    assert isinstance(out[0], DiffusionTree)
