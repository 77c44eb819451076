"""Differentiable layers built on :class:`~r4d.diffcore.tensor.Tensor`.

Besides the per-vector forms (``softmax``, ``mean_pool``) the module has
segment variants that operate on many variable-length groups packed into one
array, which is how the model batches target-reference graphs.
"""

import numpy as np

from .tensor import DimensionError, PreconditionError, Tensor, as_tensor


def linear(x, W, b):
    """``x @ W + b`` for ``x[n, in]``, ``W[in, out]``, ``b[out]``."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[0]:
        raise DimensionError(f"linear: x{x.shape} incompatible with W{W.shape}")
    if b.shape != (W.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} does not match output width {W.shape[1]}")

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ W.data.T)
        if W.requires_grad:
            W._accumulate(x.data.T @ g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0))

    return Tensor._make(x.data @ W.data + b.data, (x, W, b), backward, "linear")


def relu(x):
    return as_tensor(x).relu()


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize each row to zero mean and unit variance, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.data.ndim != 2 or x.shape[1] == 0:
        raise DimensionError(f"layer_norm needs a non-empty [n, d] input, got {x.shape}")
    d = x.shape[1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=1, keepdims=True) + eps)
    xhat = centered * inv_std

    def backward(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=0))
        if x.requires_grad:
            dxhat = g * gain.data
            dx = inv_std * (
                dxhat
                - dxhat.mean(axis=1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
            )
            x._accumulate(dx)

    return Tensor._make(xhat * gain.data + bias.data, (x, gain, bias), backward, "layer_norm")


def softmax(x):
    """Softmax of a 1-D tensor, stabilized by subtracting the max."""
    x = as_tensor(x)
    if x.data.ndim != 1 or x.size == 0:
        raise DimensionError(f"softmax needs a non-empty vector, got shape {x.shape}")
    e = np.exp(x.data - x.data.max())
    y = e / e.sum()

    def backward(g):
        x._accumulate(y * (g - np.dot(g, y)))

    return Tensor._make(y, (x,), backward, "softmax")


def mean_pool(xs):
    """Elementwise mean of a non-empty list of equally shaped tensors."""
    if len(xs) == 0:
        raise PreconditionError("mean_pool of an empty list")
    xs = [as_tensor(t) for t in xs]
    shape = xs[0].shape
    if any(t.shape != shape for t in xs):
        raise DimensionError("mean_pool inputs must share one shape")
    k = len(xs)
    out = np.mean([t.data for t in xs], axis=0)

    def backward(g):
        share = g / k
        for t in xs:
            t._accumulate(share)

    return Tensor._make(out, tuple(xs), backward, "mean_pool")


def smooth_l1(pred, target, delta=1.0, weights=None):
    """Mean Huber loss: quadratic below ``delta``, linear above.

    ``0.5 * r**2 / delta`` if ``|r| < delta`` else ``|r| - 0.5 * delta``.
    With ``weights`` the result is ``sum(weights * huber)`` instead of the mean.
    """
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"smooth_l1: {pred.shape} vs {target.shape}")
    if delta <= 0:
        raise PreconditionError("smooth_l1 delta must be positive")
    if weights is None:
        weights = 1.0 / max(pred.size, 1)
    r = pred.data - target.data
    ar = np.abs(r)
    loss = (weights * np.where(ar < delta, 0.5 * r * r / delta, ar - 0.5 * delta)).sum()
    slope = weights * np.clip(r / delta, -1.0, 1.0)

    def backward(g):
        if pred.requires_grad:
            pred._accumulate(g * slope)
        if target.requires_grad:
            target._accumulate(-g * slope)

    return Tensor._make(np.asarray(loss), (pred, target), backward, "smooth_l1")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    arrays = [t.data for t in tensors]
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            t._accumulate(piece)

    return Tensor._make(out, tuple(tensors), backward, "concat")


def take_rows(x, index):
    """Row gather ``x[index]``; repeated indices accumulate in backward."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        x._accumulate(full)

    return Tensor._make(x.data[index], (x,), backward, "take_rows")


def place_rows(x, index, n_rows):
    """Scatter the rows of ``x`` into a zero array with ``n_rows`` rows."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    out = np.zeros((n_rows,) + x.shape[1:])
    out[index] = x.data

    def backward(g):
        x._accumulate(g[index])

    return Tensor._make(out, (x,), backward, "place_rows")


class Segments:
    """Assignment of ``n_items`` rows to ``n_groups`` contiguous-or-not groups.

    Every group must be non-empty. The one-hot assignment matrix is built once
    and reused by the segment ops.
    """

    def __init__(self, group_of, n_groups):
        group_of = np.asarray(group_of, dtype=np.intp)
        self.group_of = group_of
        self.n_groups = int(n_groups)
        self.counts = np.bincount(group_of, minlength=self.n_groups).astype(np.float64)
        if np.any(self.counts == 0):
            raise PreconditionError("every segment needs at least one member")
        self.onehot = np.zeros((self.n_groups, group_of.size))
        self.onehot[group_of, np.arange(group_of.size)] = 1.0

    def __len__(self):
        return self.n_groups


def segment_sum(x, segments):
    x = as_tensor(x)
    S = segments.onehot

    def backward(g):
        x._accumulate(S.T @ g)

    return Tensor._make(S @ x.data, (x,), backward, "segment_sum")


def segment_mean(x, segments):
    """Average pooling of ``x[n_items, d]`` within each group -> ``[n_groups, d]``."""
    x = as_tensor(x)
    S = segments.onehot / segments.counts[:, None]

    def backward(g):
        x._accumulate(S.T @ g)

    return Tensor._make(S @ x.data, (x,), backward, "segment_mean")


def broadcast_segments(x, segments):
    """Copy each group row of ``x[n_groups, d]`` back to its members."""
    x = as_tensor(x)
    S = segments.onehot

    def backward(g):
        x._accumulate(S @ g)

    return Tensor._make(x.data[segments.group_of], (x,), backward, "broadcast_segments")


def segment_softmax(scores, segments):
    """Softmax of a score vector independently within each group."""
    scores = as_tensor(scores)
    if scores.data.ndim != 1:
        raise DimensionError("segment_softmax expects a 1-D score vector")
    grp = segments.group_of
    peak = np.full(segments.n_groups, -np.inf)
    np.maximum.at(peak, grp, scores.data)
    e = np.exp(scores.data - peak[grp])
    y = e / (segments.onehot @ e)[grp]

    def backward(g):
        inner = segments.onehot @ (g * y)
        scores._accumulate(y * (g - inner[grp]))

    return Tensor._make(y, (scores,), backward, "segment_softmax")
