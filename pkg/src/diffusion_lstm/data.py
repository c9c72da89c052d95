"""Diffusion trees, user tables, and their on-disk formats.

Edge file (UTF-8, tab separated)::

    tree_id  ROOT    root_user   content_id
    tree_id  parent  child

User file: a header line, then ``user_id, n_pins, n_followers, n_followings,
n_likes`` followed by 38 category counts. Empty fields are missing values.

Embedding file: ``b"EMB1"``, little-endian ``u32 count, u32 dim``, then per
record a ``u32`` byte length, the UTF-8 content id and ``dim`` float32 values.
"""
import io
import struct
from collections import defaultdict, deque
from dataclasses import dataclass, field

import numpy as np

N_ACTIVITY = 4
N_CATEGORIES = 38
ACTIVITY_FIELDS = ("n_pins", "n_followers", "n_followings", "n_likes")
ROOT = "ROOT"


class CorpusError(ValueError):
    """Malformed or inconsistent corpus input."""


class TreeError(CorpusError):
    def __init__(self, tree_id, message):
        super().__init__("tree {!r}: {}".format(tree_id, message))
        self.tree_id = tree_id


@dataclass(frozen=True)
class UserRecord:
    user_id: str
    n_pins: float
    n_followers: float
    n_followings: float
    n_likes: float
    category_counts: tuple

    @property
    def activity(self):
        return np.array([self.n_pins, self.n_followers, self.n_followings,
                         self.n_likes], dtype=float)

    @property
    def missing(self):
        """Activity fields that are absent (NaN)."""
        return tuple(name for name, v in zip(ACTIVITY_FIELDS, self.activity)
                     if np.isnan(v))


class UserTable:
    """Column store of user records.

    ``activity`` is ``(n, 4)`` with NaN for missing counts and ``categories``
    is ``(n, 38)``. ``raw`` concatenates them into the ``(n, 42)`` array the
    feature builder consumes.
    """

    def __init__(self, user_ids, activity, categories):
        self.user_ids = list(user_ids)
        self.activity = np.asarray(activity, dtype=float).reshape(-1, N_ACTIVITY)
        self.categories = np.asarray(categories, dtype=float).reshape(-1, N_CATEGORIES)
        if not (len(self.user_ids) == len(self.activity) == len(self.categories)):
            raise CorpusError("user table columns have different lengths")
        if np.any(self.activity[~np.isnan(self.activity)] < 0) or np.any(self.categories < 0):
            raise CorpusError("user counts must be non-negative")
        self.index = {u: i for i, u in enumerate(self.user_ids)}
        if len(self.index) != len(self.user_ids):
            raise CorpusError("duplicate user ids in user table")

    def __len__(self):
        return len(self.user_ids)

    def __contains__(self, user_id):
        return user_id in self.index

    def __getitem__(self, user_id):
        i = self.index[user_id]
        return UserRecord(user_id, *self.activity[i], tuple(self.categories[i]))

    @property
    def raw(self):
        return np.hstack([self.activity, self.categories])

    def rows(self, user_ids):
        return np.array([self.index[u] for u in user_ids], dtype=int)

    def subset(self, user_ids):
        idx = self.rows(user_ids)
        return UserTable([self.user_ids[i] for i in idx],
                         self.activity[idx], self.categories[idx])


@dataclass
class DiffusionTree:
    """A rooted share tree.

    Nodes are stored in breadth-first order, so ``parents[i] < i`` for every
    non-root node and node 0 is the root (``parents[0] == -1``).
    """
    tree_id: str
    content_id: str
    users: list
    parents: np.ndarray
    depth: np.ndarray = field(init=False, repr=False)
    children: list = field(init=False, repr=False)

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=int)
        n = len(self.users)
        if n == 0:
            raise TreeError(self.tree_id, "empty tree")
        if self.parents.shape != (n,) or self.parents[0] != -1:
            raise TreeError(self.tree_id, "node 0 must be the root")
        if np.any(self.parents[1:] < 0) or np.any(self.parents[1:] >= np.arange(1, n)):
            raise TreeError(self.tree_id, "nodes must be in parent-before-child order")
        self.depth = np.zeros(n, dtype=int)
        self.children = [[] for _ in range(n)]
        for i in range(1, n):
            p = self.parents[i]
            self.depth[i] = self.depth[p] + 1
            self.children[p].append(i)

    @property
    def size(self):
        return len(self.users)

    @property
    def max_depth(self):
        return int(self.depth.max())

    @property
    def width(self):
        return int(np.bincount(self.depth).max())

    def is_leaf(self):
        return np.array([not c for c in self.children], dtype=bool)

    def edges(self):
        return [(self.users[self.parents[i]], self.users[i]) for i in range(1, self.size)]


def tree_from_edges(tree_id, edges, root=None, content_id=None):
    """Build a :class:`DiffusionTree` from ``(parent, child)`` user pairs.

    Accepts exactly the edge sets that form a tree rooted at ``root`` (or at
    the unique parentless node when ``root`` is None). Children are ordered by
    user id so the result does not depend on edge order.
    """
    parent_of = {}
    kids = defaultdict(list)
    nodes = set()
    for p, c in edges:
        if p == c:
            raise TreeError(tree_id, "cycle: self-loop at {!r}".format(p))
        if c in parent_of:
            if parent_of[c] == p:
                raise TreeError(tree_id, "duplicate edge {!r}->{!r}".format(p, c))
            raise TreeError(tree_id, "node {!r} has two parents".format(c))
        parent_of[c] = p
        kids[p].append(c)
        nodes.update((p, c))
    if root is None:
        roots = sorted(nodes - set(parent_of))
        if len(roots) != 1:
            if not roots and nodes:
                raise TreeError(tree_id, "cycle: no parentless node")
            raise TreeError(tree_id, "expected one root, found {}".format(roots))
        root = roots[0]
    elif root in parent_of:
        # the root's ancestor chain must loop back, or there is a second root
        raise TreeError(tree_id, "cycle or foreign parent above root {!r}".format(root))
    users, parents = [root], [-1]
    seen = {root: 0}
    queue = deque([root])
    while queue:
        u = queue.popleft()
        for c in sorted(kids.get(u, ())):
            seen[c] = len(users)
            users.append(c)
            parents.append(seen[u])
            queue.append(c)
    if len(users) != len(nodes | {root}):
        stray = sorted((nodes | {root}) - set(seen))
        raise TreeError(tree_id, "cycle or disconnected nodes: {}".format(stray[:5]))
    return DiffusionTree(tree_id, tree_id if content_id is None else content_id,
                         users, np.array(parents))


# --- edge files -------------------------------------------------------------

def read_edges(path):
    """Parse an edge file into a list of trees (in order of first appearance)."""
    order = []
    edges = defaultdict(list)
    roots = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) < 3 or not all(parts[:3]):
                raise CorpusError("{}:{}: malformed edge row".format(path, lineno))
            tid = parts[0]
            if tid not in edges and tid not in roots:
                order.append(tid)
            if parts[1] == ROOT:
                if len(parts) != 4 or tid in roots:
                    raise CorpusError("{}:{}: malformed ROOT row".format(path, lineno))
                roots[tid] = (parts[2], parts[3])
            else:
                if len(parts) != 3:
                    raise CorpusError("{}:{}: malformed edge row".format(path, lineno))
                edges[tid].append((parts[1], parts[2]))
    trees = []
    for tid in order:
        root, content = roots.get(tid, (None, None))
        trees.append(tree_from_edges(tid, edges.get(tid, []), root, content))
    return trees


def format_edges(trees, label=None):
    """Serialize trees in edge-file format. ``label(tree, i)`` names node ``i``
    (defaults to its user id)."""
    label = label or (lambda tree, i: str(tree.users[i]))
    out = io.StringIO()
    for t in trees:
        out.write("{}\t{}\t{}\t{}\n".format(t.tree_id, ROOT, label(t, 0), t.content_id))
        for i in range(1, t.size):
            out.write("{}\t{}\t{}\n".format(t.tree_id, label(t, t.parents[i]), label(t, i)))
    return out.getvalue()


def write_edges(path, trees, label=None):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_edges(trees, label))


# --- user files -------------------------------------------------------------

USER_HEADER = ["user_id", *ACTIVITY_FIELDS] + ["cat{:02d}".format(i) for i in range(N_CATEGORIES)]


def read_users(path):
    ids, act, cats = [], [], []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
        if not header:
            raise CorpusError("{}: empty user file".format(path))
        for lineno, line in enumerate(fh, 2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 1 + N_ACTIVITY + N_CATEGORIES or not parts[0]:
                raise CorpusError("{}:{}: expected {} fields, got {}".format(
                    path, lineno, 1 + N_ACTIVITY + N_CATEGORIES, len(parts)))
            try:
                vals = [float(v) if v != "" else np.nan for v in parts[1:]]
            except ValueError:
                raise CorpusError("{}:{}: non-numeric field".format(path, lineno)) from None
            if any(v < 0 for v in vals if not np.isnan(v)):
                raise CorpusError("{}:{}: negative count".format(path, lineno))
            ids.append(parts[0])
            act.append(vals[:N_ACTIVITY])
            # a missing category count contributes nothing to the distribution
            cats.append([0.0 if np.isnan(v) else v for v in vals[N_ACTIVITY:]])
    return UserTable(ids, np.array(act).reshape(-1, N_ACTIVITY),
                     np.array(cats).reshape(-1, N_CATEGORIES))


def _fmt_count(v):
    if np.isnan(v):
        return ""
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def write_users(path, users):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(USER_HEADER) + "\n")
        for i, uid in enumerate(users.user_ids):
            vals = list(users.activity[i]) + list(users.categories[i])
            fh.write(uid + "\t" + "\t".join(_fmt_count(v) for v in vals) + "\n")


# --- embedding files --------------------------------------------------------

EMB_MAGIC = b"EMB1"


def write_embeddings(path, embeddings):
    """``embeddings`` maps content id -> 1-D vector; all of one dimension."""
    items = list(embeddings.items())
    dim = len(items[0][1]) if items else 0
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC + struct.pack("<II", len(items), dim))
        for cid, vec in items:
            vec = np.asarray(vec, dtype="<f4")
            if vec.shape != (dim,):
                raise CorpusError("embedding {!r} has shape {}, expected ({},)".format(
                    cid, vec.shape, dim))
            raw = cid.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)) + raw + vec.tobytes())


def read_embeddings(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != EMB_MAGIC or len(data) < 12:
        raise CorpusError("{}: not an EMB1 file".format(path))
    count, dim = struct.unpack_from("<II", data, 4)
    pos = 12
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            cid = data[pos:pos + n].decode("utf-8")
            pos += n
            vec = np.frombuffer(data, dtype="<f4", count=dim, offset=pos)
            pos += 4 * dim
            out[cid] = vec.astype(np.float64)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CorpusError("{}: truncated or corrupt embedding file ({})".format(path, exc)) from None
    if pos != len(data):
        raise CorpusError("{}: trailing bytes after {} records".format(path, count))
    return out


def load_corpus(edges_path, users_path, embeddings_path):
    """Read and cross-validate the three corpus files.

    Missing activity counts stay NaN here; they are mean-filled by the
    feature builder once the training split is known.
    """
    trees = read_edges(edges_path)
    users = read_users(users_path)
    embeddings = read_embeddings(embeddings_path)
    for t in trees:
        for u in t.users:
            if u not in users:
                raise CorpusError("tree {!r} references unknown user {!r}".format(t.tree_id, u))
        if t.content_id not in embeddings:
            raise CorpusError("tree {!r} references content {!r} with no embedding".format(
                t.tree_id, t.content_id))
    return trees, users, embeddings


# --- corpus operations ------------------------------------------------------

def split_corpus(trees, ratio=(6, 1, 1), seed=0):
    """Tree-level random split into ``(train, val, test)``."""
    trees = sorted(trees, key=lambda t: t.tree_id)
    n = len(trees)
    if n < len(ratio):
        raise CorpusError("cannot split {} trees into {} parts".format(n, len(ratio)))
    total = sum(ratio)
    n_val = max(1, n * ratio[1] // total)
    n_test = max(1, n * ratio[2] // total)
    perm = np.random.default_rng(seed).permutation(n)
    val = [trees[i] for i in sorted(perm[:n_val])]
    test = [trees[i] for i in sorted(perm[n_val:n_val + n_test])]
    train = [trees[i] for i in sorted(perm[n_val + n_test:])]
    return train, val, test


@dataclass(frozen=True)
class TreeStats:
    n_trees: int
    size_mean: float
    size_std: float
    width_mean: float
    width_std: float
    depth_mean: float
    depth_std: float


def corpus_stats(trees):
    if not trees:
        raise CorpusError("corpus_stats of an empty corpus")
    size = np.array([t.size for t in trees], dtype=float)
    width = np.array([t.width for t in trees], dtype=float)
    depth = np.array([t.max_depth for t in trees], dtype=float)
    return TreeStats(len(trees), size.mean(), size.std(), width.mean(), width.std(),
                     depth.mean(), depth.std())


def node_targets(tree, prototype_of, k):
    """``(size, k + 1)`` 0/1 matrix; column ``u < k`` marks a child in
    prototype ``u``, column ``k`` marks a leaf."""
    try:
        protos = np.array([prototype_of[u] for u in tree.users], dtype=int)
    except KeyError as exc:
        raise TreeError(tree.tree_id, "user {} has no prototype".format(exc)) from None
    if np.any((protos < 0) | (protos >= k)):
        raise TreeError(tree.tree_id, "prototype id out of range [0, {})".format(k))
    t = np.zeros((tree.size, k + 1), dtype=np.uint8)
    if tree.size > 1:
        t[tree.parents[1:], protos[1:]] = 1
    t[:, k] = tree.is_leaf()
    return t


@dataclass(frozen=True)
class TruncationCaps:
    """Largest allowed depth, node count and per-level width of a tree."""
    depth: int = 10
    size: int = 150
    width: int = 100

    def admits(self, tree):
        return (tree.max_depth <= self.depth and tree.size <= self.size
                and tree.width <= self.width)
