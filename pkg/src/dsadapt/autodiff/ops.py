"""Differentiable layer primitives used by the encoder, decoder and heads.

Convolutions are computed with strided window views and ``tensordot``;
the transposed convolution is the exact adjoint of ``conv2d`` (its forward
is conv2d's input gradient and vice versa).
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, make_op

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """View of shape (N, C, H', W', kh, kw) over an already padded input."""
    v = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return v[:, :, ::stride, ::stride]


def _scatter_windows(cols: np.ndarray, out_hw: tuple[int, int], stride: int) -> np.ndarray:
    """Adjoint of ``_windows``: sum (N, C, H', W', kh, kw) patches into (N, C, H, W)."""
    n, c, oh, ow, kh, kw = cols.shape
    out = np.zeros((n, c) + out_hw, dtype=cols.dtype)
    h_span = stride * (oh - 1) + 1
    w_span = stride * (ow - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + h_span:stride, j:j + w_span:stride] += cols[:, :, :, :, i, j]
    return out


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an (N, Cin, H, W) batch with (Cout, Cin, kH, kW) filters."""
    _require(x.ndim == 4, f"conv2d input must be 4-D (N,C,H,W), got shape {x.shape}")
    _require(kernel.ndim == 4, f"conv2d kernel must be 4-D (Cout,Cin,kH,kW), got shape {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    _require(cin == kcin, f"conv2d channel mismatch: input has {cin}, kernel expects {kcin}")
    _require(stride >= 1, f"stride must be >= 1, got {stride}")
    _require(h + 2 * padding >= kh and w + 2 * padding >= kw,
             f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    if bias is not None:
        _require(bias.shape == (cout,), f"conv2d bias must have shape ({cout},), got {bias.shape}")

    xp = _pad(x.data, padding)
    win = _windows(xp, kh, kw, stride)
    oh, ow = win.shape[2], win.shape[3]
    out = np.tensordot(win, kernel.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        gk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        cols = np.tensordot(g, kernel.data, axes=([1], [0]))  # N, oh, ow, Cin, kh, kw
        gxp = _scatter_windows(cols.transpose(0, 3, 1, 2, 4, 5), xp.shape[2:], stride)
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gk, gb

    parents = (x, kernel, bias) if bias is not None else (x, kernel)
    return make_op(out, parents, bw, "conv2d")


def conv2d_transpose(x: Tensor, kernel: Tensor, bias: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution with (Cin, Cout, kH, kW) filters.

    Output extent is (H - 1) * stride + kH - 2 * padding per spatial axis.
    """
    _require(x.ndim == 4, f"conv2d_transpose input must be 4-D (N,C,H,W), got shape {x.shape}")
    _require(kernel.ndim == 4, f"conv2d_transpose kernel must be 4-D (Cin,Cout,kH,kW), got shape {kernel.shape}")
    n, cin, h, w = x.shape
    kcin, cout, kh, kw = kernel.shape
    _require(cin == kcin, f"conv2d_transpose channel mismatch: input has {cin}, kernel expects {kcin}")
    _require(stride >= 1, f"stride must be >= 1, got {stride}")
    full_h, full_w = (h - 1) * stride + kh, (w - 1) * stride + kw
    oh, ow = full_h - 2 * padding, full_w - 2 * padding
    _require(oh >= 1 and ow >= 1, f"padding {padding} leaves an empty output")
    if bias is not None:
        _require(bias.shape == (cout,), f"conv2d_transpose bias must have shape ({cout},), got {bias.shape}")

    cols = np.tensordot(x.data, kernel.data, axes=([1], [0]))  # N, H, W, Cout, kh, kw
    full = _scatter_windows(cols.transpose(0, 3, 1, 2, 4, 5), (full_h, full_w), stride)
    out = full[:, :, padding:padding + oh, padding:padding + ow]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        gfull = _pad(g, padding)
        win = _windows(gfull, kh, kw, stride)  # N, Cout, H, W, kh, kw
        gx = np.tensordot(win, kernel.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        gk = np.tensordot(x.data, win, axes=([0, 2, 3], [0, 2, 3]))
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return np.ascontiguousarray(gx), gk, gb

    parents = (x, kernel, bias) if bias is not None else (x, kernel)
    return make_op(out, parents, bw, "conv2d_transpose")


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray | None = None,
                running_var: np.ndarray | None = None, training: bool = True,
                eps: float = BN_EPS, momentum: float = BN_MOMENTUM) -> Tensor:
    """Per-channel batch normalization of an (N, C, H, W) tensor.

    In training mode the running buffers (if given) are updated in place with
    ``momentum``; the running variance uses the unbiased batch estimate.
    """
    _require(x.ndim == 4, f"batchnorm2d input must be 4-D, got shape {x.shape}")
    c = x.shape[1]
    _require(gamma.shape == (c,) and beta.shape == (c,), f"batchnorm2d affine params must have shape ({c},)")
    axes = (0, 2, 3)
    m = x.shape[0] * x.shape[2] * x.shape[3]
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if running_mean is not None:
            running_mean *= 1 - momentum
            running_mean += momentum * mean
        if running_var is not None:
            unbiased = var * m / (m - 1) if m > 1 else var
            running_var *= 1 - momentum
            running_var += momentum * unbiased
    else:
        _require(running_mean is not None and running_var is not None, "eval mode needs running statistics")
        mean, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def bw(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * gamma.data[None, :, None, None]
        if training:
            gx = (inv_std[None, :, None, None] / m) * (
                m * gxhat
                - gxhat.sum(axis=axes)[None, :, None, None]
                - xhat * (gxhat * xhat).sum(axis=axes)[None, :, None, None]
            )
        else:
            gx = gxhat * inv_std[None, :, None, None]
        return gx.astype(x.dtype), gg, gb

    return make_op(out.astype(x.dtype), (x, gamma, beta), bw, "batchnorm2d")


def maxpool2d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    """Windowed maximum; ties route the gradient to the first index in row-major order."""
    stride = kernel if stride is None else stride
    _require(x.ndim == 4, f"maxpool2d input must be 4-D, got shape {x.shape}")
    _require(kernel <= x.shape[2] and kernel <= x.shape[3],
             f"pool kernel {kernel} larger than input {x.shape[2]}x{x.shape[3]}")
    win = _windows(x.data, kernel, kernel, stride)
    n, c, oh, ow = win.shape[:4]
    flat = win.reshape(n, c, oh, ow, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        cols = np.zeros((n, c, oh, ow, kernel * kernel), dtype=g.dtype)
        np.put_along_axis(cols, arg[..., None], g[..., None], axis=-1)
        return (_scatter_windows(cols.reshape(n, c, oh, ow, kernel, kernel), x.shape[2:], stride),)

    return make_op(out, (x,), bw, "maxpool2d")


def _adaptive_edges(size: int, out: int) -> list[tuple[int, int]]:
    return [(math.floor(i * size / out), math.ceil((i + 1) * size / out)) for i in range(out)]


def adaptive_maxpool2d(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Max over floor/ceil bins so that the output is exactly (out_h, out_w)."""
    _require(x.ndim == 4, f"adaptive_maxpool2d input must be 4-D, got shape {x.shape}")
    n, c, h, w = x.shape
    _require(1 <= out_h <= h and 1 <= out_w <= w,
             f"adaptive pool output {out_h}x{out_w} larger than input {h}x{w}")
    rows, cols_ = _adaptive_edges(h, out_h), _adaptive_edges(w, out_w)
    out = np.empty((n, c, out_h, out_w), dtype=x.dtype)
    argmax = {}
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols_):
            block = x.data[:, :, r0:r1, c0:c1].reshape(n, c, -1)
            a = block.argmax(axis=-1)
            argmax[i, j] = a
            out[:, :, i, j] = np.take_along_axis(block, a[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols_):
                bw_ = c1 - c0
                a = argmax[i, j]
                ri, ci = r0 + a // bw_, c0 + a % bw_
                nn, cc = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
                np.add.at(gx, (nn, cc, ri, ci), g[:, :, i, j])
        return (gx,)

    return make_op(out, (x,), bw, "adaptive_maxpool2d")


def dense(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for (N, Din) inputs and (Dout, Din) weights."""
    _require(x.ndim == 2, f"dense input must be 2-D (N,Din), got shape {x.shape}")
    _require(weight.ndim == 2 and weight.shape[1] == x.shape[1],
             f"dense weight {weight.shape} incompatible with input width {x.shape[1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        _require(bias.shape == (weight.shape[0],), f"dense bias must have shape ({weight.shape[0]},)")
        out = out + bias.data

    def bw(g):
        return g @ weight.data, g.T @ x.data, (g.sum(axis=0) if bias is not None else None)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_op(out, parents, bw, "dense")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return make_op(y, (x,), lambda g: (g * (1 - y * y),), "tanh")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "tanh":
        return tanh(x)
    raise ValueError(f"unknown activation {kind!r}; expected 'relu' or 'tanh'")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    _require(logits.ndim == 2, f"logits must be 2-D (N,K), got shape {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    _require(labels.shape == (n,), f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def bw(g):
        d = np.exp(logp)
        d[rows, labels] -= 1
        return ((g / n) * d).astype(logits.dtype),

    return make_op(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "cross_entropy")


def mse(a: Tensor, b) -> Tensor:
    b = b if isinstance(b, Tensor) else Tensor(np.asarray(b, dtype=a.dtype))
    _require(a.shape == b.shape, f"mse operands differ in shape: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def bw(g):
        ga = (2 * g / n) * diff
        return ga.astype(a.dtype), (-ga).astype(b.dtype)

    return make_op(np.asarray((diff * diff).mean(), dtype=a.dtype), (a, b), bw, "mse")
