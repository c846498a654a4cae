"""Differentiable operations.

Image ops accept ``layout="NCHW"`` (the public default) or ``"NHWC"``; the
network builder runs channels-last internally because the patch matrix
it produces feeds BLAS in its fastest orientation.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ._kernels import col2im, im2col
from .tensor import Tensor, as_tensor, log_kink, make_node

# Op names whose backward is deliberately corrupted; only the self-test
# harness touches this, to prove the gradient checker can fail.
FAULTS: set[str] = set()

_LAYOUTS = ("NCHW", "NHWC")


def _faulty(name: str, grad: np.ndarray) -> np.ndarray:
    return grad * 1.5 if name in FAULTS else grad


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_node(a.data * b.data, (a, b), bw)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    return make_node(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                     lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    x = as_tensor(x)
    n = x.size

    def bw(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return make_node(np.asarray(x.data.mean(), dtype=x.dtype), (x,), bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    inverse = np.argsort(axes)
    return make_node(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                     lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        index = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[axis] = slice(lo, hi)
            out.append(g[tuple(index)])
        return out

    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return make_node(a.data @ b.data, (a, b), bw)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight + bias`` for ``x`` of shape N x D."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2:
        raise ValueError(f"dense: expected 2-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ValueError(f"dense: input has {x.shape[1]} features but weight expects {weight.shape[0]}")
    if bias.shape != (weight.shape[1],):
        raise ValueError(f"dense: bias shape {bias.shape} does not match output width {weight.shape[1]}")

    def bw(g):
        gx = g @ weight.data.T if x.requires_grad else None
        return gx, _faulty("dense", x.data.T @ g), g.sum(axis=0)

    return make_node(x.data @ weight.data + bias.data, (x, weight, bias), bw)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    log_kink(mask)
    # np.maximum keeps NaN so divergence is not masked
    return make_node(np.maximum(x.data, x.dtype.type(0)), (x,),
                     lambda g: (_faulty("relu", g * mask),))


def _check_layout(layout: str) -> None:
    if layout not in _LAYOUTS:
        raise ValueError(f"unknown layout {layout!r}; expected one of {_LAYOUTS}")


def _to_nhwc(a: np.ndarray, layout: str) -> np.ndarray:
    return np.ascontiguousarray(a.transpose(0, 2, 3, 1)) if layout == "NCHW" else a


def _from_nhwc(a: np.ndarray, layout: str) -> np.ndarray:
    return np.ascontiguousarray(a.transpose(0, 3, 1, 2)) if layout == "NCHW" else a


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0,
           layout: str = "NCHW") -> Tensor:
    """2-D cross-correlation with an ``O x I x K x K`` weight (no bias)."""
    x, weight = as_tensor(x), as_tensor(weight)
    _check_layout(layout)
    if x.ndim != 4:
        raise ValueError(f"conv2d: input must be 4-D {layout}, got shape {x.shape}")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ValueError(f"conv2d: weight must be O x I x K x K, got shape {weight.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: stride must be >= 1 and padding >= 0 (got {stride}, {padding})")
    xh = _to_nhwc(x.data, layout)
    n, h, w, c = xh.shape
    o, i, k, _ = weight.shape
    if c != i:
        raise ValueError(f"conv2d: input has {c} channels but weight expects I={i}")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ValueError(f"conv2d: kernel {k} does not fit input {h}x{w} with padding {padding}")

    cols = im2col(xh, k, stride, padding)
    ho, wo = cols.shape[1], cols.shape[2]
    patches = cols.reshape(n * ho * wo, k * k * c)
    wmat = np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0).reshape(k * k * c, o))
    out = (patches @ wmat).reshape(n, ho, wo, o)

    def bw(g):
        g2 = _to_nhwc(g, layout).reshape(n * ho * wo, o)
        gw = (patches.T @ g2).reshape(k, k, c, o).transpose(3, 2, 0, 1)
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(n, ho, wo, k, k, c)
            gx = _from_nhwc(col2im(dcols, (n, h, w, c), k, stride, padding), layout)
        return gx, _faulty("conv2d", np.ascontiguousarray(gw))

    return make_node(_from_nhwc(out, layout), (x, weight), bw)


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                 running_var: np.ndarray, training: bool, eps: float = 1e-5,
                 momentum: float = 0.1, layout: str = "NCHW") -> Tensor:
    """Per-channel normalisation.

    In training mode the batch statistics normalise the input and the
    running estimates are updated in place (unbiased variance); in eval mode
    the running estimates are used as-is.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _check_layout(layout)
    if x.ndim != 4:
        raise ValueError(f"batch_norm2d: input must be 4-D, got shape {x.shape}")
    caxis = 1 if layout == "NCHW" else 3
    c = x.shape[caxis]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm2d: gamma/beta must have length {c}, got {gamma.shape}/{beta.shape}")
    axes = tuple(a for a in range(4) if a != caxis)
    bshape = [1, 1, 1, 1]
    bshape[caxis] = c
    m = x.size // c

    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.astype(x.dtype).reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            scale = (gamma.data * inv_std).reshape(bshape)
            if training:
                gx = scale * (g - (dbeta / m).reshape(bshape) - xhat * (dgamma / m).reshape(bshape))
            else:
                gx = g * scale
            gx = _faulty("batch_norm2d", gx)
        return gx, dgamma, dbeta

    return make_node(out.astype(x.dtype, copy=False), (x, gamma, beta), bw)


def max_pool2(x: Tensor, layout: str = "NCHW") -> Tensor:
    """2x2 max pooling with stride 2; a trailing odd row/column is dropped."""
    x = as_tensor(x)
    _check_layout(layout)
    xh = _to_nhwc(x.data, layout)
    n, h, w, c = xh.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise ValueError(f"max_pool2: input {h}x{w} is too small")
    win = (xh[:, : 2 * h2, : 2 * w2]
           .reshape(n, h2, 2, w2, 2, c)
           .transpose(0, 1, 3, 5, 2, 4)
           .reshape(n, h2, w2, c, 4))
    idx = win.argmax(axis=-1)
    log_kink(idx.astype(np.uint8))
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros((n, h2, w2, c, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], _to_nhwc(g, layout)[..., None], axis=-1)
        gx = np.zeros((n, h, w, c), dtype=g.dtype)
        gx[:, : 2 * h2, : 2 * w2] = (gw.reshape(n, h2, w2, c, 2, 2)
                                     .transpose(0, 1, 4, 2, 5, 3)
                                     .reshape(n, 2 * h2, 2 * w2, c))
        return (_from_nhwc(gx, layout),)

    return make_node(_from_nhwc(np.ascontiguousarray(out), layout), (x,), bw)


def global_avg_pool(x: Tensor, layout: str = "NCHW") -> Tensor:
    """Spatial mean, returning an ``N x C`` tensor."""
    x = as_tensor(x)
    _check_layout(layout)
    axes = (2, 3) if layout == "NCHW" else (1, 2)
    hw = x.shape[axes[0]] * x.shape[axes[1]]

    def bw(g):
        gg = g / hw
        gg = gg[:, :, None, None] if layout == "NCHW" else gg[:, None, None, :]
        return (np.broadcast_to(gg, x.shape).astype(x.dtype),)

    return make_node(x.data.mean(axis=axes), (x,), bw)


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = softmax_np(x.data)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return make_node(s, (x,), bw)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[label]``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ValueError(f"softmax_cross_entropy: logits must be N x K, got {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"softmax_cross_entropy: expected {n} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("softmax_cross_entropy: labels must be integers")
    if n and (labels.min() < 0 or labels.max() >= k):
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise ValueError(f"softmax_cross_entropy: label {bad} outside [0, {k})")
    if n == 0:
        raise ValueError("softmax_cross_entropy: empty batch")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sums = ez.sum(axis=1)
    lse = np.log(sums)
    rows = np.arange(n)
    loss = (lse - z[rows, labels]).mean()

    def bw(g):
        grad = ez / sums[:, None]
        grad[rows, labels] -= 1.0
        return (_faulty("softmax_cross_entropy", grad * (g / n)),)

    return make_node(np.asarray(loss, dtype=logits.dtype), (logits,), bw)
