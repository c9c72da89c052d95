"""Dense numeric primitives with hand-written backward passes.

Everything operates on numpy arrays. Functions accept either a single vector
or a batch of row vectors (``(n, dim)``); the backward functions mirror the
forward shapes. ``grad_check`` is the finite-difference oracle used by the
test-suite against every analytic gradient in the package.
"""
from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    pass


def _shape_error(op, *shapes):
    return ShapeError("{}: incompatible shapes {}".format(
        op, " and ".join(str(tuple(s)) for s in shapes)))


def affine(x, W, b):
    """Return ``x @ W.T + b`` for a vector or a batch of row vectors."""
    x = np.asarray(x)
    if W.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise _shape_error("affine", x.shape, W.shape)
    if b.shape != (W.shape[0],):
        raise _shape_error("affine", W.shape, b.shape)
    return x @ W.T + b


def affine_backward(upstream, x, W):
    """Gradients ``(dx, dW, db)`` of ``affine(x, W, b)``."""
    upstream = np.asarray(upstream)
    x = np.asarray(x)
    if upstream.shape[-1] != W.shape[0]:
        raise _shape_error("affine_backward", upstream.shape, W.shape)
    dx = upstream @ W
    if x.ndim == 1:
        dW = np.outer(upstream, x)
        db = upstream.copy()
    else:
        dW = upstream.T @ x
        db = upstream.sum(axis=0)
    return dx, dW, db


def sigmoid(x):
    # split by sign so exp never overflows
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(upstream, out):
    """``out`` is the forward output sigmoid(x)."""
    return upstream * out * (1.0 - out)


def tanh(x):
    return np.tanh(x)


def tanh_backward(upstream, out):
    return upstream * (1.0 - out * out)


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(upstream, x):
    """``x`` is the forward *input*."""
    return upstream * (np.asarray(x) > 0)


def dropout(x, rate, train, rng=None):
    """Inverted dropout. Returns ``(out, mask)`` where ``mask`` already holds
    the ``1/(1-rate)`` scale, so the backward pass is ``upstream * mask``.

    In eval mode, or with ``rate == 0``, the output is ``x`` itself and the
    mask is ``None``.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1), got {}".format(rate))
    if not train or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("train-mode dropout needs a seeded generator")
    keep = rng.random(np.shape(x)) >= rate
    mask = keep / (1.0 - rate)
    return x * mask, mask


def dropout_backward(upstream, mask):
    if mask is None:
        return upstream
    return upstream * mask


@dataclass(frozen=True)
class GradCheckReport:
    max_relative_error: float
    worst_parameter_index: int
    analytic: float
    numeric: float
    ok: bool = True
    failed_index: int = -1

    def __str__(self):
        if not self.ok:
            return "non-finite objective at parameter {}".format(self.failed_index)
        return "max rel err {:.3e} at {} (analytic {:.6g}, numeric {:.6g})".format(
            self.max_relative_error, self.worst_parameter_index,
            self.analytic, self.numeric)


def numeric_gradient(f, theta, step=1e-5):
    """Central finite differences of scalar ``f`` at ``theta``.

    Returns ``(grad, bad_index)``; ``bad_index`` is the first coordinate where
    ``f`` was non-finite, or -1.
    """
    theta = np.array(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    flat = theta.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(theta)
        flat[i] = orig - step
        fm = f(theta)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            return grad, i
        g[i] = (fp - fm) / (2.0 * step)
    return grad, -1


def grad_check(f, theta, step=1e-5, analytic=None):
    """Compare an analytic gradient with central differences.

    ``f(theta)`` returns either a scalar, or ``(value, gradient)`` when
    ``analytic`` is not supplied. The error per coordinate is
    ``|a - n| / max(1, |a|, |n|)``.
    """
    theta = np.array(theta, dtype=np.float64)
    if analytic is None:
        _, analytic = f(theta)

        def scalar(t):
            return f(t)[0]
    else:
        scalar = f
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    numeric, bad = numeric_gradient(scalar, theta, step)
    if bad >= 0:
        return GradCheckReport(np.inf, bad, float("nan"), float("nan"),
                               ok=False, failed_index=bad)
    numeric = numeric.reshape(-1)
    if analytic.size == 0:
        return GradCheckReport(0.0, 0, 0.0, 0.0)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    err = np.abs(analytic - numeric) / denom
    worst = int(np.argmax(err))
    return GradCheckReport(float(err[worst]), worst,
                           float(analytic[worst]), float(numeric[worst]))
