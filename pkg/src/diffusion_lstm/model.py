"""The Diffusion-LSTM network, its ablations and the memoryless FC baseline.

The recurrence runs top-down: each child starts from its parent's ``(c, h)``
and the root starts from ``c0`` (a projection of the content embedding) and
``h0 = 0``. A parent feeding several children receives the sum of their
gradients on the way back.

All parameters of a model live in one flat float64 buffer; ``params[name]``
returns a reshaped view, so an SGD step is a single vector update.
"""
import os
import struct
from collections import OrderedDict

import numpy as np

from . import kernel as K
from .batching import TreeBatch
from .prototypes import SOCIAL_DIM

VARIANTS = ("full", "social_only", "image_only", "random_weights", "fc")
VARIANT_TAGS = {name: i for i, name in enumerate(VARIANTS)}
GATES = ("f", "i", "o", "c")
# variants whose root memory is projected from the content embedding
IMAGE_MEMORY = ("full", "random_weights")


def input_dim(variant, emb_dim):
    if variant == "image_only":
        return emb_dim
    if variant == "fc":
        return SOCIAL_DIM + emb_dim
    return SOCIAL_DIM


def param_shapes(variant, hidden, head, emb_dim, k):
    """Ordered ``name -> shape``; this order is also the checkpoint order."""
    if variant not in VARIANT_TAGS:
        raise ValueError("unknown variant {!r}; expected one of {}".format(variant, VARIANTS))
    H, F, D, n_out = hidden, head, emb_dim, k + 1
    d_in = input_dim(variant, emb_dim)
    shapes = OrderedDict()
    if variant == "fc":
        shapes["W1"] = (H, d_in)
        shapes["b1"] = (H,)
        shapes["W2"] = (F, H)
        shapes["b2"] = (F,)
        shapes["W3"] = (n_out, F)
        shapes["b3"] = (n_out,)
        return shapes
    for g in GATES:
        shapes["Wx_" + g] = (H, d_in)
        shapes["Wh_" + g] = (H, H)
        shapes["b_" + g] = (H,)
    shapes["W_img"] = (H, D)
    shapes["b_img"] = (H,)
    shapes["W1"] = (F, H)
    shapes["b1"] = (F,)
    shapes["W2"] = (n_out, F)
    shapes["b2"] = (n_out,)
    return shapes


class ModelParams:
    """Learnable weights of one model variant, backed by a flat vector."""

    def __init__(self, variant, hidden, head, emb_dim, k, flat=None):
        self.variant = variant
        self.hidden = int(hidden)
        self.head = int(head)
        self.emb_dim = int(emb_dim)
        self.k = int(k)
        self.shapes = param_shapes(variant, hidden, head, emb_dim, k)
        total = sum(int(np.prod(s)) for s in self.shapes.values())
        if flat is None:
            flat = np.zeros(total)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (total,):
            raise K.ShapeError("flat parameter vector has shape {}, expected ({},)".format(
                flat.shape, total))
        self.flat = flat
        self._views = OrderedDict()
        pos = 0
        for name, shape in self.shapes.items():
            n = int(np.prod(shape))
            self._views[name] = self.flat[pos:pos + n].reshape(shape)
            pos += n
        self.step = 0

    def __getitem__(self, name):
        return self._views[name]

    def __setitem__(self, name, value):
        self._views[name][...] = value

    def names(self):
        return list(self.shapes)

    @property
    def dims(self):
        return dict(variant=self.variant, hidden=self.hidden, head=self.head,
                    emb_dim=self.emb_dim, k=self.k)

    def copy(self):
        p = ModelParams(self.variant, self.hidden, self.head, self.emb_dim, self.k,
                        self.flat.copy())
        p.step = self.step
        return p

    def zeros_like(self):
        return ModelParams(self.variant, self.hidden, self.head, self.emb_dim, self.k)

    def with_flat(self, flat):
        return ModelParams(self.variant, self.hidden, self.head, self.emb_dim, self.k, flat)

    def all_finite(self):
        return bool(np.all(np.isfinite(self.flat)))


def init_params(variant, hidden=256, head=128, emb_dim=4096, k=100, seed=0):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) per matrix; a bias uses the
    bound of the matrix feeding it."""
    rng = np.random.default_rng(seed)
    p = ModelParams(variant, hidden, head, emb_dim, k)
    bound = 1.0
    for name, shape in p.shapes.items():
        if len(shape) == 2:
            bound = 1.0 / np.sqrt(shape[1])
        p[name] = rng.uniform(-bound, bound, size=shape)
    return p


# --- building blocks --------------------------------------------------------

def _stacked(params):
    Wx = np.vstack([params["Wx_" + g] for g in GATES])
    Wh = np.vstack([params["Wh_" + g] for g in GATES])
    b = np.concatenate([params["b_" + g] for g in GATES])
    return Wx, Wh, b


def init_root(embedding, params):
    """Root parent memory ``c0`` (rows match ``embedding`` rows) and ``h0 = 0``."""
    embedding = np.asarray(embedding, dtype=np.float64)
    if embedding.shape[-1] != params.emb_dim:
        raise K.ShapeError("init_root: embedding dim {} != model dim {}".format(
            embedding.shape[-1], params.emb_dim))
    c0 = K.affine(embedding, params["W_img"], params["b_img"])
    return c0, np.zeros_like(c0)


def cell_step(x, c_parent, h_parent, params, _stack=None):
    """One parent -> child transition for one node or a batch of rows.

    Returns ``(c, h, cache)`` where ``cache`` holds the gate activations
    ``(f, i, o, g)`` needed by :func:`cell_backward`.
    """
    Wx, Wh, b = _stack or _stacked(params)
    H = params.hidden
    z = K.affine(x, Wx, b) + h_parent @ Wh.T
    f = K.sigmoid(z[..., :H])
    i = K.sigmoid(z[..., H:2 * H])
    o = K.sigmoid(z[..., 2 * H:3 * H])
    g = K.tanh(z[..., 3 * H:])
    c = f * c_parent + i * g
    tc = K.tanh(c)
    h = o * tc
    return c, h, (f, i, o, g, tc)


def cell_backward(dh, dc, c_parent, gates):
    """Gradients of the cell. Returns ``(dz, dc_parent)``; ``dz`` is w.r.t. the
    stacked gate pre-activations in f, i, o, c order."""
    f, i, o, g, tc = gates
    do = dh * tc
    dct = dc + K.tanh_backward(dh * o, tc)
    dz = np.concatenate([K.sigmoid_backward(dct * c_parent, f),
                         K.sigmoid_backward(dct * g, i),
                         K.sigmoid_backward(do, o),
                         K.tanh_backward(dct * i, g)], axis=-1)
    return dz, dct * f


def head(h, params, train=False, rng=None, rate=0.0):
    """dropout -> FC -> ReLU -> dropout -> FC -> sigmoid. Returns
    ``(probs, cache)``."""
    d1, m1 = K.dropout(h, rate, train, rng)
    a1 = K.affine(d1, params["W1"], params["b1"])
    r = K.relu(a1)
    d2, m2 = K.dropout(r, rate, train, rng)
    logits = K.affine(d2, params["W2"], params["b2"])
    probs = K.sigmoid(logits)
    return probs, (d1, m1, a1, d2, m2, probs)


def head_backward(dprobs, params, cache, grads):
    """Accumulate head parameter gradients into ``grads``; return ``dh``."""
    d1, m1, a1, d2, m2, probs = cache
    dlogits = K.sigmoid_backward(dprobs, probs)
    dd2, dW2, db2 = K.affine_backward(dlogits, d2, params["W2"])
    grads["W2"] += dW2
    grads["b2"] += db2
    da1 = K.relu_backward(K.dropout_backward(dd2, m2), a1)
    dd1, dW1, db1 = K.affine_backward(da1, d1, params["W1"])
    grads["W1"] += dW1
    grads["b1"] += db1
    return K.dropout_backward(dd1, m1)


# --- whole-batch passes ----------------------------------------------------

def _step_inputs(params, batch):
    if params.variant == "image_only":
        return batch.embedding[batch.tree_of]
    if params.variant == "fc":
        return np.hstack([batch.social, batch.embedding[batch.tree_of]])
    return batch.social


def tree_forward(params, batch, train=False, rng=None, rate=0.0):
    """Teacher-forced forward pass over a :class:`TreeBatch` (or one
    EncodedTree). Returns ``(probs, cache)`` with probs in batch order."""
    if not isinstance(batch, TreeBatch):
        batch = TreeBatch([batch])
    if params.variant == "fc":
        return _fc_forward(params, batch, train, rng, rate)
    x = _step_inputs(params, batch)
    if x.shape[1] != params.shapes["Wx_f"][1]:
        raise K.ShapeError("tree_forward: node input dim {} != model input dim {}".format(
            x.shape[1], params.shapes["Wx_f"][1]))
    H = params.hidden
    n = batch.n_nodes
    if params.variant in IMAGE_MEMORY:
        c0, _ = init_root(batch.embedding, params)
    else:
        c0 = np.zeros((len(batch.trees), H))
    stack = _stacked(params)
    c = np.empty((n, H))
    h = np.empty((n, H))
    cp = np.empty((n, H))
    hp = np.empty((n, H))
    gates = [np.empty((n, H)) for _ in range(5)]
    for depth, sl in enumerate(batch.levels):
        if depth == 0:
            cp[sl] = c0[batch.tree_of[sl]]
            hp[sl] = 0.0
        else:
            par = batch.parent[sl]
            if np.any(par < 0):
                raise ValueError("tree_forward: disconnected node below the root level")
            cp[sl] = c[par]
            hp[sl] = h[par]
        c[sl], h[sl], gs = cell_step(x[sl], cp[sl], hp[sl], params, stack)
        for buf, v in zip(gates, gs):
            buf[sl] = v
    probs, hcache = head(h, params, train, rng, rate)
    cache = dict(batch=batch, x=x, c=c, h=h, cp=cp, hp=hp, gates=gates, head=hcache,
                 stack=stack, variant=params.variant)
    return probs, cache


def tree_backward(params, cache, dprobs):
    """Parameter gradients given ``dL/dprobs`` (batch order, same shape as the
    forward probs). Returns a ModelParams holding the gradient."""
    if cache.get("variant") != params.variant or dprobs.shape[0] != cache["batch"].n_nodes:
        raise ValueError("tree_backward: cache does not match parameters / gradients")
    if params.variant == "fc":
        return _fc_backward(params, cache, dprobs)
    grads = params.zeros_like()
    batch = cache["batch"]
    H = params.hidden
    dh = head_backward(dprobs, params, cache["head"], grads)
    dc = np.zeros_like(dh)
    dz_all = np.empty((batch.n_nodes, 4 * H))
    dc0 = np.zeros((len(batch.trees), H))
    _, Wh, _ = cache["stack"]
    gates = cache["gates"]
    for depth in range(len(batch.levels) - 1, -1, -1):
        sl = batch.levels[depth]
        dz, dcp = cell_backward(dh[sl], dc[sl], cache["cp"][sl], [gt[sl] for gt in gates])
        dz_all[sl] = dz
        if depth == 0:
            np.add.at(dc0, batch.tree_of[sl], dcp)
        else:
            # children of one parent add into the same row
            par = batch.parent[sl]
            np.add.at(dh, par, dz @ Wh)
            np.add.at(dc, par, dcp)
    dWx = dz_all.T @ cache["x"]
    dWh = dz_all.T @ cache["hp"]
    db = dz_all.sum(axis=0)
    for j, g in enumerate(GATES):
        rows = slice(j * H, (j + 1) * H)
        grads["Wx_" + g] += dWx[rows]
        grads["Wh_" + g] += dWh[rows]
        grads["b_" + g] += db[rows]
    if params.variant in IMAGE_MEMORY:
        grads["W_img"] += dc0.T @ batch.embedding
        grads["b_img"] += dc0.sum(axis=0)
    return grads


def _fc_forward(params, batch, train, rng, rate):
    x = _step_inputs(params, batch)
    if x.shape[1] != params.shapes["W1"][1]:
        raise K.ShapeError("baseline_fc: input dim {} != model input dim {}".format(
            x.shape[1], params.shapes["W1"][1]))
    a1 = K.affine(x, params["W1"], params["b1"])
    d1, m1 = K.dropout(K.relu(a1), rate, train, rng)
    a2 = K.affine(d1, params["W2"], params["b2"])
    d2, m2 = K.dropout(K.relu(a2), rate, train, rng)
    probs = K.sigmoid(K.affine(d2, params["W3"], params["b3"]))
    return probs, dict(batch=batch, x=x, a1=a1, d1=d1, m1=m1, a2=a2, d2=d2, m2=m2,
                       probs=probs, variant="fc")


def _fc_backward(params, cache, dprobs):
    grads = params.zeros_like()
    dlog = K.sigmoid_backward(dprobs, cache["probs"])
    dd2, grads["W3"], grads["b3"] = K.affine_backward(dlog, cache["d2"], params["W3"])
    da2 = K.relu_backward(K.dropout_backward(dd2, cache["m2"]), cache["a2"])
    dd1, grads["W2"], grads["b2"] = K.affine_backward(da2, cache["d1"], params["W2"])
    da1 = K.relu_backward(K.dropout_backward(dd1, cache["m1"]), cache["a1"])
    _, grads["W1"], grads["b1"] = K.affine_backward(da1, cache["x"], params["W1"])
    return grads


def baseline_fc(params, batch, train=False, rng=None, rate=0.0):
    """Memoryless three-layer baseline; each node sees only its own input."""
    if params.variant != "fc":
        raise ValueError("baseline_fc needs fc parameters, got {!r}".format(params.variant))
    return tree_forward(params, batch, train, rng, rate)


def ablation_variant(variant, hidden=256, head=128, emb_dim=4096, k=100, seed=0):
    """Freshly initialized parameters for ``variant``.

    ``full`` projects the embedding into the root memory and feeds social
    features; ``social_only`` zeroes the root memory; ``image_only`` zeroes
    the root memory and feeds the embedding at every step; ``random_weights``
    is ``full`` left untrained; ``fc`` is the memoryless baseline.
    """
    return init_params(variant, hidden, head, emb_dim, k, seed)


# --- checkpoints -------------------------------------------------------------

DLM_MAGIC = b"DLM1"


def params_to_bytes(params):
    header = struct.pack("<5I", params.hidden, params.head, params.emb_dim, params.k,
                         VARIANT_TAGS[params.variant])
    return (DLM_MAGIC + header + params.flat.astype("<f4").tobytes()
            + struct.pack("<Q", params.step))


def params_from_bytes(data):
    if data[:4] != DLM_MAGIC or len(data) < 24 + 8:
        raise ValueError("not a DLM1 checkpoint")
    H, F, D, k, tag = struct.unpack_from("<5I", data, 4)
    if tag >= len(VARIANTS):
        raise ValueError("unknown variant tag {}".format(tag))
    p = ModelParams(VARIANTS[tag], H, F, D, k)
    n = p.flat.size
    if len(data) != 24 + 4 * n + 8:
        raise ValueError("checkpoint size {} does not match header (expected {})".format(
            len(data), 24 + 4 * n + 8))
    p.flat[:] = np.frombuffer(data, dtype="<f4", count=n, offset=24)
    (p.step,) = struct.unpack_from("<Q", data, 24 + 4 * n)
    return p


def save_checkpoint(path, params):
    tmp = "{}.tmp".format(path)
    with open(tmp, "wb") as fh:
        fh.write(params_to_bytes(params))
    os.replace(tmp, path)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return params_from_bytes(fh.read())
