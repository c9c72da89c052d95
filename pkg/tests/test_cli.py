import fcntl
import io

import numpy as np
import pytest

from diffusion_lstm import cli
from diffusion_lstm.model import init_params, load_checkpoint, save_checkpoint


def run(*argv):
    out = io.StringIO()
    code = cli.main([str(a) for a in argv], out=out)
    return code, out.getvalue()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    w = tmp_path_factory.mktemp("run")
    assert run("synth", "--workdir", w, "--trees", 300, "--seed", 4)[0] == 0
    assert run("cluster", "--workdir", w, "--seed", 4, "--k", 8)[0] == 0
    return w


def test_synth_is_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert run("synth", "--workdir", tmp_path / d, "--trees", 50, "--seed", 7)[0] == 0
    for name in ("edges.tsv", "users.tsv", "embeddings.emb", "manifest.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    manifest = (tmp_path / "a" / "manifest.txt").read_text()
    assert "seed=7" in manifest and "branching=0.75" in manifest


def test_synth_zero_trees_is_a_usage_error(tmp_path):
    assert run("synth", "--workdir", tmp_path, "--trees", 0)[0] == 2


def test_unknown_config_key_and_bad_flag(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("trees = 10\nwarp_speed = 9\n")
    assert run("synth", "--workdir", tmp_path, "--config", cfg)[0] == 2
    assert run("synth", "--workdir", tmp_path, "--trees", "many")[0] == 2
    assert run("synth", "--workdir", tmp_path, "--variant", "lstm2")[0] == 2


def test_flags_override_config_file_and_effective_config_reproduces(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("# corpus\ntrees = 10\nseed = 3\n")
    assert run("synth", "--workdir", tmp_path / "a", "--config", cfg, "--trees", 20)[0] == 0
    eff = tmp_path / "a" / "effective.cfg"
    assert "trees = 20" in eff.read_text() and "seed = 3" in eff.read_text()
    assert len({line.split("\t")[0] for line in
                (tmp_path / "a" / "edges.tsv").read_text().splitlines()}) == 20
    assert run("synth", "--config", eff, "--workdir", tmp_path / "b")[0] == 0
    assert ((tmp_path / "a" / "edges.tsv").read_bytes()
            == (tmp_path / "b" / "edges.tsv").read_bytes())


def test_cluster_errors(tmp_path, workdir):
    code = run("cluster", "--workdir", tmp_path, "--k", 3)[0]
    assert code == 2
    assert run("cluster", "--workdir", workdir, "--k", 10 ** 6)[0] == 2


def test_cluster_prints_sizes_and_is_reproducible(workdir, tmp_path):
    before = (workdir / "prototypes.pro").read_bytes()
    code, out = run("cluster", "--workdir", workdir, "--seed", 4, "--k", 8)
    assert code == 0 and len(out.splitlines()) == 8
    assert (workdir / "prototypes.pro").read_bytes() == before


def test_train_eval_generate(workdir):
    code, _ = run("train", "--workdir", workdir, "--seed", 4, "--hidden", 8, "--head", 8,
                  "--max-epochs", 1, "--batch-size", 16)
    assert code == 0
    p = load_checkpoint(workdir / "model.dlm")
    assert (p.variant, p.hidden, p.k) == ("full", 8, 8)
    assert len((workdir / "train.log").read_text().splitlines()) == 1

    code, out = run("eval", "--workdir", workdir, "--seed", 4)
    assert code == 0
    first = (workdir / "metrics_node.txt").read_bytes()
    assert run("eval", "--workdir", workdir, "--seed", 4)[0] == 0
    assert (workdir / "metrics_node.txt").read_bytes() == first
    keys = {line.split("=")[0] for line in first.decode().splitlines()}
    assert {"ap_terminal", "map_prototypes", "map_all", "excluded_classes", "n_nodes"} <= keys

    assert run("eval", "--workdir", workdir, "--seed", 4, "--mode", "tree")[0] == 0
    tree_keys = (workdir / "metrics_tree.txt").read_text()
    assert "depth_mae=" in tree_keys and "\nhi=" in tree_keys and "n_trees=" in tree_keys

    edge = (workdir / "edges.tsv").read_text().splitlines()[0].split("\t")
    args = ("generate", "--workdir", workdir, "--seed", 4, "--root-user", edge[2],
            "--content-id", edge[3])
    code, dump = run(*args)
    assert code == 0 and dump.splitlines()[0].split("\t")[1] == "ROOT"
    assert run(*args)[1] == dump
    labels = (workdir / "generated_labels.tsv").read_text().splitlines()
    assert len(labels) == len(dump.splitlines())
    assert all(len(line.split("\t")) == 4 for line in labels)
    assert run("generate", "--workdir", workdir, "--root-user", edge[2],
               "--content-id", "no-such-item")[0] == 2


def test_generate_with_terminal_always_model(workdir, tmp_path):
    p = init_params("full", 4, 4, 32, 8, seed=0)
    p["W2"] = 0.0
    p["b2"] = np.r_[np.full(8, -50.0), 50.0]
    ckpt = tmp_path / "model.dlm"
    save_checkpoint(ckpt, p)
    for name in ("edges.tsv", "users.tsv", "embeddings.emb", "prototypes.pro"):
        (tmp_path / name).write_bytes((workdir / name).read_bytes())
    edge = (workdir / "edges.tsv").read_text().splitlines()[0].split("\t")
    code, dump = run("generate", "--workdir", tmp_path, "--seed", 4,
                     "--root-user", edge[2], "--content-id", edge[3])
    assert code == 0 and len(dump.splitlines()) == 1


def test_random_weights_checkpoint_and_resume_mismatch(workdir, tmp_path):
    for name in ("edges.tsv", "users.tsv", "embeddings.emb", "prototypes.pro"):
        (tmp_path / name).write_bytes((workdir / name).read_bytes())
    code, out = run("train", "--workdir", tmp_path, "--variant", "random_weights",
                    "--hidden", 4, "--head", 4)
    assert code == 0 and "untrained" in out
    assert load_checkpoint(tmp_path / "model.dlm").step == 0
    code = run("train", "--workdir", tmp_path, "--variant", "random_weights",
               "--hidden", 6, "--head", 4, "--resume", "yes")[0]
    assert code == 2


def test_eval_without_checkpoint(tmp_path, workdir):
    for name in ("edges.tsv", "users.tsv", "embeddings.emb", "prototypes.pro"):
        (tmp_path / name).write_bytes((workdir / name).read_bytes())
    assert run("eval", "--workdir", tmp_path)[0] == 2


def test_divergence_exits_3(workdir, tmp_path):
    for name in ("edges.tsv", "users.tsv", "embeddings.emb", "prototypes.pro"):
        (tmp_path / name).write_bytes((workdir / name).read_bytes())
    with np.errstate(all="ignore"):
        code = run("train", "--workdir", tmp_path, "--hidden", 4, "--head", 4,
                   "--lr-initial", "inf", "--max-epochs", 2)[0]
    assert code == 3


def test_locked_workdir_is_refused(tmp_path):
    with open(tmp_path / ".lock", "w") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        assert run("synth", "--workdir", tmp_path, "--trees", 5)[0] == 2
    assert run("synth", "--workdir", tmp_path, "--trees", 5)[0] == 0
