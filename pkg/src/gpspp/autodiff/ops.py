"""The fixed set of differentiable ops used by the model."""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from ..exceptions import ConfigError, ShapeError
from .tensor import Tensor, as_tensor, make, unbroadcast

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _check_rate(rate):
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")


def reshape(x, shape):
    x = as_tensor(x)
    return make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes):
    x = as_tensor(x)
    inverse = np.argsort(axes)
    return make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def concat(xs, axis=-1):
    xs = [as_tensor(x) for x in xs]
    if len(xs) == 1:
        return xs[0]
    try:
        data = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"cannot concatenate shapes {[x.shape for x in xs]}") from exc
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make(data, xs, backward)


def sum(x, axis=None, keepdims=False):  # noqa: A001
    x = as_tensor(x)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)


def mean(x, axis=None):
    x = as_tensor(x)
    count = x.size if axis is None else x.shape[axis]
    return sum(x, axis=axis) * (1.0 / count)


def absolute(x):
    x = as_tensor(x)
    return make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def dense(x, w, b=None):
    """``x @ w + b``."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"dense input width {x.shape[-1]} != weight rows {w.shape[0]}")
    out = x @ w
    return out if b is None else out + b


def gelu(x):
    """Exact GELU, ``x * Phi(x)``."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data**2)
    return make(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


def relu(x):
    x = as_tensor(x)
    active = x.data > 0
    return make(np.where(active, x.data, 0.0), (x,), lambda g: (g * active,))


def layer_norm(x, gamma, beta, eps=1e-9):
    """Normalise over the last axis, then apply the affine ``gamma``/``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    inv_std = 1.0 / np.sqrt((centred**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centred * inv_std

    def backward(g):
        dxhat = g * gamma.data
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make(xhat * gamma.data + beta.data, (x, gamma, beta), backward)


def masked_softmax(logits, mask=None, axis=-1):
    """Softmax over ``axis`` restricted to entries where ``mask`` is true.

    Masked entries are exactly zero and rows with no valid entry are all zero.
    """
    logits = as_tensor(logits)
    z = logits.data
    if mask is not None:
        mask = np.broadcast_to(mask, z.shape)
        z = np.where(mask, z, -np.inf)
    peak = z.max(axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    e = np.exp(z - peak)
    total = e.sum(axis=axis, keepdims=True)
    y = e / np.where(total == 0.0, 1.0, total)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make(y, (logits,), backward)


def softmax(logits, axis=-1):
    return masked_softmax(logits, None, axis)


def dropout(x, rate, rng=None):
    """Inverted dropout; identity when ``rate`` is 0 or ``rng`` is None (evaluation)."""
    _check_rate(rate)
    x = as_tensor(x)
    if rate == 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return make(x.data * keep, (x,), lambda g: (g * keep,))


def graph_dropout(x, rate, row_graph, num_graphs, rng=None):
    """Drop whole graphs: one Bernoulli keep draw per graph, broadcast over its rows.

    ``row_graph`` maps each leading-axis row to its graph (``-1`` for padding,
    which is always kept).
    """
    _check_rate(rate)
    x = as_tensor(x)
    if rate == 0.0 or rng is None:
        return x
    keep_graph = (rng.random(num_graphs) >= rate) / (1.0 - rate)
    row_graph = np.asarray(row_graph)
    keep = np.where(row_graph >= 0, keep_graph[np.maximum(row_graph, 0)], 1.0)
    keep = keep.reshape((-1,) + (1,) * (x.ndim - 1))
    return make(x.data * keep, (x,), lambda g: (g * keep,))


def embed(table, idx):
    """Select rows ``table[idx]``; ``idx`` may have any shape."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding index outside table of {table.shape[0]} rows")

    def backward(g):
        out = np.zeros_like(table.data)
        np.add.at(out, idx.ravel(), g.reshape(-1, table.shape[1]))
        return (out,)

    return make(table.data[idx], (table,), backward)


def gather_rows(x, idx):
    """``out[k] = x[idx[k]]``; entries with ``idx == -1`` produce zero rows."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    valid = idx >= 0
    safe = np.where(valid, idx, 0)
    if safe.size and safe.max() >= x.shape[0]:
        raise ShapeError(f"gather index outside {x.shape[0]} rows")
    vmask = valid.reshape((-1,) + (1,) * (x.ndim - 1))
    data = x.data[safe] * vmask

    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx[valid], g[valid])
        return (out,)

    return make(data, (x,), backward)


def scatter_add_rows(x, idx, num_rows):
    """``out[r] = sum of x[k] over k with idx[k] == r``; ``idx == -1`` is dropped."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape[0] != x.shape[0]:
        raise ShapeError(f"scatter index length {idx.shape[0]} != rows {x.shape[0]}")
    valid = idx >= 0
    if valid.any() and idx.max() >= num_rows:
        raise ShapeError(f"scatter index outside {num_rows} rows")
    out = np.zeros((num_rows,) + x.shape[1:])
    np.add.at(out, idx[valid], x.data[valid])
    vmask = valid.reshape((-1,) + (1,) * (x.ndim - 1))

    def backward(g):
        return (g[np.where(valid, idx, 0)] * vmask,)

    return make(out, (x,), backward)


segment_sum = scatter_add_rows


def scatter_pairs(values, rows, cols, n):
    """Place ``values[p, h]`` at ``out[h, rows[p], cols[p]]`` of a zero ``(H, n, n)`` array."""
    values = as_tensor(values)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    out = np.zeros((values.shape[1], n, n))
    out[:, rows, cols] = values.data.T
    return make(out, (values,), lambda g: (g[:, rows, cols].T.copy(),))


def row_norm(x):
    """Euclidean norm over the last axis; the gradient at zero is taken as zero."""
    x = as_tensor(x)
    n = np.sqrt((x.data**2).sum(axis=-1))

    def backward(g):
        safe = np.where(n > 0, n, 1.0)
        return (x.data * (np.where(n > 0, g / safe, 0.0))[..., None],)

    return make(n, (x,), backward)


def gaussian_kernels(dist, mu, sigma, min_sigma=1e-3):
    """``psi[..., k] = -exp(-((d - mu_k) / s_k)^2 / 2) / (sqrt(2 pi) s_k)``, ``s_k = max(|sigma_k|, min_sigma)``."""
    dist, mu, sigma = as_tensor(dist), as_tensor(mu), as_tensor(sigma)
    s = np.maximum(np.abs(sigma.data), min_sigma)
    z = (dist.data[..., None] - mu.data) / s
    psi = -_INV_SQRT_2PI / s * np.exp(-0.5 * z * z)

    def backward(g):
        d_dist = (g * (-psi * z / s)).sum(axis=-1)
        d_mu = unbroadcast(g * (psi * z / s), mu.shape)
        d_s = unbroadcast(g * (psi * (z * z - 1.0) / s), sigma.shape)
        d_sigma = d_s * np.sign(sigma.data) * (np.abs(sigma.data) >= min_sigma)
        return d_dist, d_mu, d_sigma

    return make(psi, (dist, mu, sigma), backward)


def cross_entropy(logits, targets):
    """Per-row categorical cross-entropy of ``logits`` (n, V) against integer ``targets`` (n,)."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    z = logits.data
    peak = z.max(axis=-1, keepdims=True)
    shifted = z - peak
    log_total = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - log_total
    rows = np.arange(len(targets))
    losses = -log_probs[rows, targets]

    def backward(g):
        grad = np.exp(log_probs)
        grad[rows, targets] -= 1.0
        return (grad * g[:, None],)

    return make(losses, (logits,), backward)


def where_const(mask, x, fill=0.0):
    """Keep ``x`` where ``mask`` is true, a constant elsewhere."""
    x = as_tensor(x)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    return make(np.where(mask, x.data, fill), (x,), lambda g: (np.where(mask, g, 0.0),))


__all__ = [
    "Tensor",
    "absolute",
    "concat",
    "cross_entropy",
    "dense",
    "dropout",
    "embed",
    "gather_rows",
    "gaussian_kernels",
    "gelu",
    "graph_dropout",
    "layer_norm",
    "masked_softmax",
    "mean",
    "relu",
    "reshape",
    "row_norm",
    "scatter_add_rows",
    "scatter_pairs",
    "segment_sum",
    "softmax",
    "sum",
    "transpose",
    "where_const",
]
