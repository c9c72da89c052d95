"""Command line entry point: ``diffusion-lstm {synth,cluster,train,eval,generate}``.

Settings come from defaults, then an optional flat ``key = value`` file
(``--config``), then command line flags. The merged configuration is written
to ``<workdir>/effective.cfg`` so a run can be repeated from it.

Exit codes: 0 success, 2 usage or input error, 3 numeric failure.
"""
import argparse
import contextlib
import dataclasses
import fcntl
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .data import (CorpusError, TruncationCaps, load_corpus, write_edges, write_embeddings,
                   write_users)
from .evaluation import (GenerationConfig, calibrate_thresholds, chance_score,
                         format_generated, generate_for, generate_trees, per_node_eval,
                         score_trees)
from .model import VARIANTS, init_params, load_checkpoint, save_checkpoint
from .pipeline import fit_prototype_space, prepare, seed_for, split
from .prototypes import PrototypeModel
from .synthetic import generate_synthetic, make_world
from .training import NonFiniteGradient, TrainConfig, class_weights, train

log = logging.getLogger("diffusion_lstm")

EXIT_USAGE = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class NumericError(Exception):
    pass


@dataclasses.dataclass
class RunConfig:
    # paths; None means the conventional file inside the workdir
    workdir: str = "."
    edges: str = None
    users: str = None
    embeddings: str = None
    seed: int = 0
    # synthetic corpus
    trees: int = 10000
    world_k: int = 10
    topics: int = 4
    branching: float = 0.75
    heterogeneity: float = 0.8
    emb_dim: int = 32
    users_per_prototype: int = 160
    # prototypes
    k: int = 100
    kmeans_iters: int = 100
    kmeans_restarts: int = 10
    # model and training
    variant: str = "full"
    hidden: int = 256
    head: int = 128
    lr_initial: float = 0.2
    lr_reduced: float = 0.02
    plateau_patience: int = 3
    min_delta: float = 1e-4
    max_epochs: int = 60
    batch_size: int = 32
    dropout_rate: float = 0.5
    clip_threshold: float = 5.0
    resume: bool = False
    # evaluation and generation
    mode: str = "node"
    terminal_threshold: float = 0.5
    prototype_threshold: float = None   # None: calibrate on validation
    max_depth: int = 10
    max_size: int = 150
    max_width: int = 100
    root_user: str = None
    content_id: str = None

    def path(self, name):
        given = getattr(self, name, None)
        if given:
            return Path(given)
        return Path(self.workdir) / FILES[name]

    def train_config(self):
        return TrainConfig(self.lr_initial, self.lr_reduced, self.plateau_patience,
                           self.min_delta, self.max_epochs, self.batch_size,
                           self.dropout_rate, seed_for(self.seed, "train"),
                           self.clip_threshold)

    def caps(self):
        return TruncationCaps(self.max_depth, self.max_size, self.max_width)


FILES = dict(edges="edges.tsv", users="users.tsv", embeddings="embeddings.emb",
             manifest="manifest.txt", prototypes="prototypes.pro",
             checkpoint="model.dlm", train_log="train.log", effective="effective.cfg",
             generated="generated.tsv", labels="generated_labels.tsv", lock=".lock")

FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
# fields whose default is None still need a parser
_TYPES = dict(edges=str, users=str, embeddings=str, prototype_threshold=float,
              root_user=str, content_id=str)


def _parse_value(name, text):
    f = FIELDS[name]
    typ = _TYPES.get(name) or type(f.default)
    text = text.strip()
    if text.lower() in ("", "none") and f.default is None:
        return None
    if typ is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError("{}: expected a boolean, got {!r}".format(name, text))
    try:
        return typ(text)
    except ValueError:
        raise UsageError("{}: expected {}, got {!r}".format(name, typ.__name__, text)) from None


def read_config_file(path):
    """Flat ``key = value`` pairs; ``#`` starts a comment. Unknown keys are
    rejected."""
    values = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError("cannot read config {}: {}".format(path, exc.strerror)) from None
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError("{}:{}: expected key = value".format(path, lineno))
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in FIELDS:
            raise UsageError("{}:{}: unknown key {!r}".format(path, lineno, key))
        values[key] = _parse_value(key, val)
    return values


def format_config(cfg):
    lines = []
    for name in FIELDS:
        v = getattr(cfg, name)
        if v is not None:
            lines.append("{} = {}".format(name, v))
    return "\n".join(lines) + "\n"


def build_config(args):
    values = {}
    if args.config:
        values.update(read_config_file(args.config))
    for name in FIELDS:
        if hasattr(args, name):
            values[name] = getattr(args, name)
    cfg = RunConfig(**values)
    if cfg.variant not in VARIANTS:
        raise UsageError("unknown variant {!r}; choose from {}".format(
            cfg.variant, ", ".join(VARIANTS)))
    if cfg.mode not in ("node", "tree"):
        raise UsageError("mode must be node or tree")
    return cfg


# --- plumbing ----------------------------------------------------------------

@contextlib.contextmanager
def workdir_lock(workdir):
    """Advisory exclusive lock so two commands never mutate one workdir."""
    path = Path(workdir) / FILES["lock"]
    try:
        fh = open(path, "w")
    except OSError as exc:
        raise UsageError("workdir {} is not writable: {}".format(workdir, exc.strerror)) from None
    try:
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except OSError:
            raise UsageError("workdir {} is locked by another command".format(workdir)) from None
        yield
    finally:
        fh.close()


def _require(path, what):
    if not Path(path).is_file():
        raise UsageError("{} not found: {}".format(what, path))
    return path


def _load_corpus(cfg):
    paths = [_require(cfg.path(n), n + " file") for n in ("edges", "users", "embeddings")]
    return load_corpus(*paths)


def _load_prototypes(cfg):
    path = _require(cfg.path("prototypes"), "prototype file")
    try:
        return PrototypeModel.load(path)
    except ValueError as exc:
        raise UsageError("{}: {}".format(path, exc)) from None


def _load_checkpoint(cfg):
    path = _require(cfg.path("checkpoint"), "checkpoint")
    try:
        return load_checkpoint(path)
    except ValueError as exc:
        raise UsageError("{}: {}".format(path, exc)) from None


def _check_dims(params, k, emb_dim):
    if params.k != k or params.emb_dim != emb_dim:
        raise UsageError("checkpoint has k={}, D={} but the data has k={}, D={}".format(
            params.k, params.emb_dim, k, emb_dim))


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_report(path, items):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key, val in items:
            fh.write("{}={}\n".format(key, _fmt(val)))


CATEGORY_NAMES = ["cat{:02d}".format(i) for i in range(38)]


def top_categories(dist, n=3):
    order = np.argsort(-dist, kind="stable")[:n]
    return ["{}:{:.3f}".format(CATEGORY_NAMES[j], dist[j]) for j in order]


# --- commands ----------------------------------------------------------------

def cmd_synth(cfg, out):
    if cfg.trees < 1:
        raise UsageError("--trees must be at least 1")
    world = make_world(k=cfg.world_k, n_topics=cfg.topics, branching=cfg.branching,
                       heterogeneity=cfg.heterogeneity, emb_dim=cfg.emb_dim,
                       users_per_prototype=cfg.users_per_prototype, seed=cfg.seed)
    corpus = generate_synthetic(world, cfg.trees, caps=cfg.caps())
    write_edges(cfg.path("edges"), corpus.trees)
    write_users(cfg.path("users"), corpus.users)
    write_embeddings(cfg.path("embeddings"), corpus.embeddings)
    items = sorted(world.params.items()) + [
        ("n_trees", cfg.trees), ("n_users", len(corpus.users)),
        ("expected_size", world.expected_size())]
    write_report(cfg.path("manifest"), items)
    print("wrote {} trees, {} users".format(cfg.trees, len(corpus.users)), file=out)


def cmd_cluster(cfg, out):
    trees, users, _ = _load_corpus(cfg)
    train_trees, _, _ = split(trees, cfg.seed)
    n_distinct = len({u for t in train_trees for u in t.users})
    if cfg.k < 2 or cfg.k > n_distinct:
        raise UsageError("k={} needs 2 <= k <= {} (distinct training users)".format(
            cfg.k, n_distinct))
    model, km, _ = fit_prototype_space(train_trees, users, cfg.k, cfg.seed,
                                       cfg.kmeans_iters)
    model.save(cfg.path("prototypes"))
    sizes = np.bincount(km.labels_, minlength=cfg.k)
    for j, n in enumerate(sizes):
        print("cluster {}\t{}".format(j, n), file=out)


def _prepared(cfg):
    trees, users, emb = _load_corpus(cfg)
    protos = _load_prototypes(cfg)
    return prepare(trees, users, emb, protos, cfg.seed), users


def cmd_train(cfg, out):
    P, _ = _prepared(cfg)
    k = P.prototypes.k
    D = P.train[0].embedding.shape[0]
    ckpt = cfg.path("checkpoint")
    if cfg.resume and ckpt.is_file():
        params = _load_checkpoint(cfg)
        if (params.variant, params.hidden, params.head) != (cfg.variant, cfg.hidden, cfg.head):
            raise UsageError("checkpoint is {} H={} F={} but config asks for {} H={} F={}"
                             .format(params.variant, params.hidden, params.head,
                                     cfg.variant, cfg.hidden, cfg.head))
        _check_dims(params, k, D)
    else:
        params = init_params(cfg.variant, cfg.hidden, cfg.head, D, k,
                             seed=seed_for(cfg.seed, "init"))
    if cfg.variant == "random_weights":
        save_checkpoint(ckpt, params)
        open(cfg.path("train_log"), "w").close()
        print("wrote untrained checkpoint", file=out)
        return
    weights = class_weights(np.concatenate([t.targets for t in P.train]))
    try:
        config = cfg.train_config()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    save_checkpoint(ckpt, params)
    result = train(params, P.train, P.val, weights, config, ckpt, cfg.path("train_log"),
                   on_epoch=lambda r: print(r.line(), file=out))
    if result.diverged:
        raise NumericError("training diverged: {}".format(result.stop_reason))
    save_checkpoint(ckpt, result.params)
    print("stopped: {}; best validation loss {!r}".format(
        result.stop_reason, result.best_val_loss), file=out)


def cmd_eval(cfg, out):
    P, _ = _prepared(cfg)
    params = _load_checkpoint(cfg)
    _check_dims(params, P.prototypes.k, P.test[0].embedding.shape[0])
    if cfg.mode == "node":
        res = per_node_eval(params, P.test)
        items = [("mode", "node")] + list(res.as_dict().items())
    else:
        centroids = P.prototypes.centroids
        if cfg.prototype_threshold is None:
            gcfg, _ = calibrate_thresholds(params, P.val, centroids,
                                           terminal_threshold=cfg.terminal_threshold,
                                           caps=cfg.caps())
        else:
            gcfg = GenerationConfig(cfg.terminal_threshold, cfg.prototype_threshold,
                                    cfg.caps())
        dists = P.prototypes.category_distributions()
        score = score_trees(generate_for(params, P.test, centroids, gcfg), P.test, dists)
        chance = chance_score(P.train, P.test, dists,
                              np.random.default_rng(seed_for(cfg.seed, "chance")))
        items = ([("mode", "tree"), ("terminal_threshold", gcfg.terminal_threshold),
                  ("prototype_threshold", gcfg.prototype_threshold)]
                 + list(score.as_dict().items())
                 + [("chance_depth_mae", chance.depth_mae), ("chance_hi", chance.hi)])
    path = Path(cfg.workdir) / "metrics_{}.txt".format(cfg.mode)
    write_report(path, items)
    for key, val in items:
        print("{}={}".format(key, _fmt(val)), file=out)


def cmd_generate(cfg, out):
    trees, users, emb = _load_corpus(cfg)
    protos = _load_prototypes(cfg)
    if cfg.content_id is None or cfg.root_user is None:
        raise UsageError("generate needs --root-user and --content-id")
    if cfg.content_id not in emb:
        raise UsageError("unknown content_id {!r}".format(cfg.content_id))
    if cfg.root_user not in users:
        raise UsageError("unknown root user {!r}".format(cfg.root_user))
    P = prepare(trees, users, emb, protos, cfg.seed)
    params = _load_checkpoint(cfg)
    _check_dims(params, protos.k, len(emb[cfg.content_id]))
    e = P.scaler.transform(np.asarray(emb[cfg.content_id], dtype=np.float64)[None])
    root = P.features[cfg.root_user][None]
    gcfg = GenerationConfig(cfg.terminal_threshold, cfg.prototype_threshold or 0.5,
                            cfg.caps())
    tree = generate_trees(params, root, e, protos.centroids, gcfg, ["g0"])[0]
    tree.content_id = cfg.content_id
    text = format_generated([tree])
    cfg.path("generated").write_text(text, encoding="utf-8")
    dists = protos.category_distributions()
    with open(cfg.path("labels"), "w", encoding="utf-8", newline="\n") as fh:
        for i, p in enumerate(tree.users):
            fh.write("{}@{}\t{}\n".format(p, i, "\t".join(top_categories(dists[int(p)]))))
    out.write(text)


COMMANDS = dict(synth=cmd_synth, cluster=cmd_cluster, train=cmd_train, eval=cmd_eval,
                generate=cmd_generate)


# --- argument parsing --------------------------------------------------------

def _flag_type(name):
    def conv(text):
        try:
            return _parse_value(name, text)
        except UsageError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None
    return conv


def make_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value settings file")
    for name in FIELDS:
        common.add_argument("--" + name.replace("_", "-"), dest=name,
                            type=_flag_type(name), default=argparse.SUPPRESS,
                            metavar=name.upper())
    parser = argparse.ArgumentParser(prog="diffusion-lstm", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=fn.__doc__)
    return parser


def main(argv=None, out=None):
    out = out or sys.stdout
    try:
        args = make_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = build_config(args)
        os.makedirs(cfg.workdir, exist_ok=True)
        with workdir_lock(cfg.workdir):
            cfg.path("effective").write_text(format_config(cfg), encoding="utf-8")
            COMMANDS[args.command](cfg, out)
    except (UsageError, CorpusError) as exc:
        print("error: {}".format(exc), file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print("error: {}".format(exc), file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, NonFiniteGradient, FloatingPointError) as exc:
        print("numeric failure: {}".format(exc), file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
