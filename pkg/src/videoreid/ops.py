"""Differentiable operations over :class:`~videoreid.tensor.Tensor`.

Convolutions run as patch-matrix (im2col) products so the inner loops are
matrix multiplies; the tests pin every optimized path to a direct-loop
oracle. Backward rules are closures over what forward already computed.
"""

from __future__ import annotations

from typing import Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, record


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# Elementwise and scalar arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return record(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    return record(a.data * b.data, (a, b),
                  lambda g: (g * b.data, g * a.data), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return record(x.data * c, (x,), lambda g: (g * c,), "scale")


def add_scalar(x: Tensor, c: float) -> Tensor:
    return record(x.data + float(c), (x,), lambda g: (g,), "add_scalar")


def positive_part(x: Tensor) -> Tensor:
    """max(0, x); the kink at 0 gets subgradient 0."""
    mask = x.data > 0
    return record(np.where(mask, x.data, 0.0), (x,),
                  lambda g: (g * mask,), "positive_part")


# ---------------------------------------------------------------------------
# Pointwise nonlinearities


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    # Sign-split form: never exponentiates a large positive argument.
    flat = np.atleast_1d(np.asarray(z, dtype=np.float64))
    out = np.empty_like(flat)
    pos = flat >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-flat[pos]))
    ez = np.exp(flat[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out.reshape(np.shape(z))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return record(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)
    return record(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


# ---------------------------------------------------------------------------
# Reductions


def reduce_sum(x: Tensor, axis: Optional[int] = None) -> Tensor:
    if axis is None:
        out = x.data.sum()
        return record(out, (x,),
                      lambda g: (np.broadcast_to(g, x.data.shape),), "sum")
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"sum: axis {axis} out of range for shape {x.data.shape}")
    out = x.data.sum(axis=axis)

    def backward_rule(g):
        return (np.broadcast_to(np.expand_dims(g, axis), x.data.shape),)

    return record(out, (x,), backward_rule, "sum")


def reduce_mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    if axis is None:
        count = x.data.size
        out = x.data.mean()
        return record(out, (x,),
                      lambda g: (np.broadcast_to(g / count, x.data.shape),), "mean")
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"mean: axis {axis} out of range for shape {x.data.shape}")
    count = x.data.shape[axis]
    out = x.data.mean(axis=axis)

    def backward_rule(g):
        return (np.broadcast_to(np.expand_dims(g / count, axis), x.data.shape),)

    return record(out, (x,), backward_rule, "mean")


# ---------------------------------------------------------------------------
# Shape manipulation


def flatten(x: Tensor) -> Tensor:
    shape = x.data.shape
    return record(x.data.reshape(-1).copy(), (x,),
                  lambda g: (g.reshape(shape),), "flatten")


def transpose2d(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose2d needs a matrix, got shape {x.data.shape}")
    return record(x.data.T.copy(), (x,), lambda g: (g.T,), "transpose2d")


def stack_rows(rows: Sequence[Tensor]) -> Tensor:
    rows = tuple(rows)
    if not rows:
        raise ShapeError("stack_rows: no rows")
    width = rows[0].data.shape
    for r in rows:
        if r.data.ndim != 1 or r.data.shape != width:
            raise ShapeError("stack_rows: rows must be equal-length vectors")
    out = np.stack([r.data for r in rows])

    def backward_rule(g):
        return tuple(g[i] for i in range(len(rows)))

    return record(out, rows, backward_rule, "stack_rows")


def select(x: Tensor, index: int) -> Tensor:
    if x.data.ndim != 1:
        raise ShapeError("select needs a vector")
    if not 0 <= index < x.data.shape[0]:
        raise ShapeError(f"select: index {index} out of range {x.data.shape[0]}")

    def backward_rule(g):
        z = np.zeros_like(x.data)
        z[index] = float(g)
        return (z,)

    return record(x.data[index], (x,), backward_rule, "select")


def crop_last(x: Tensor, start: int, length: int) -> Tensor:
    extent = x.data.shape[-1]
    if start < 0 or start + length > extent:
        raise ShapeError(f"crop_last: [{start}, {start + length}) outside extent {extent}")
    out = x.data[..., start:start + length].copy()

    def backward_rule(g):
        z = np.zeros_like(x.data)
        z[..., start:start + length] = g
        return (z,)

    return record(out, (x,), backward_rule, "crop_last")


def pad_edge_last(x: Tensor, pad: int) -> Tensor:
    """Replicate-pad the last axis by ``pad`` on both sides."""
    if pad < 0:
        raise ShapeError("pad_edge_last: negative pad")
    if pad == 0:
        return x
    extent = x.data.shape[-1]
    widths = [(0, 0)] * (x.data.ndim - 1) + [(pad, pad)]
    out = np.pad(x.data, widths, mode="edge")

    def backward_rule(g):
        gx = g[..., pad:pad + extent].copy()
        gx[..., 0] += g[..., :pad].sum(axis=-1)
        gx[..., -1] += g[..., pad + extent:].sum(axis=-1)
        return (gx,)

    return record(out, (x,), backward_rule, "pad_edge_last")


def edge_replicate_rows(x: Tensor, n_target: int) -> Tensor:
    """Extend an (N, d) matrix to n_target rows by repeating the last row."""
    n = x.data.shape[0]
    if n_target < n:
        raise ShapeError("edge_replicate_rows: target shorter than input")
    if n_target == n:
        return x
    extra = np.tile(x.data[-1], (n_target - n, 1))
    out = np.concatenate([x.data, extra], axis=0)

    def backward_rule(g):
        gx = g[:n].copy()
        gx[-1] += g[n:].sum(axis=0)
        return (gx,)

    return record(out, (x,), backward_rule, "edge_replicate_rows")


# ---------------------------------------------------------------------------
# Linear algebra


def matvec(a: Tensor, v: Tensor) -> Tensor:
    if a.data.ndim != 2 or v.data.ndim != 1 or a.data.shape[1] != v.data.shape[0]:
        raise ShapeError(f"matvec: {a.data.shape} @ {v.data.shape}")
    out = a.data @ v.data

    def backward_rule(g):
        return np.outer(g, v.data), a.data.T @ g

    return record(out, (a, v), backward_rule, "matvec")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map weight @ x + bias for a vector input."""
    if x.data.ndim != 1 or weight.data.ndim != 2:
        raise ShapeError("linear expects a vector input and a matrix weight")
    d_out, d_in = weight.data.shape
    if x.data.shape[0] != d_in or bias.data.shape != (d_out,):
        raise ShapeError(f"linear: weight {weight.data.shape}, input {x.data.shape}, "
                         f"bias {bias.data.shape}")
    out = weight.data @ x.data + bias.data
    need_x = x.requires_grad

    def backward_rule(g):
        gx = weight.data.T @ g if need_x else None
        return gx, np.outer(g, x.data), g

    return record(out, (x, weight, bias), backward_rule, "linear")


def l2_normalize(v: Tensor, eps: float = 1e-12) -> Tensor:
    """v / (||v|| + eps); the eps keeps the zero vector at zero."""
    if v.data.ndim != 1:
        raise ShapeError("l2_normalize needs a vector")
    norm = float(np.linalg.norm(v.data))
    denom = norm + eps
    out = v.data / denom

    def backward_rule(g):
        n_safe = norm if norm > 0.0 else 1.0
        return (g / denom - v.data * (float(np.dot(g, v.data)) / (n_safe * denom * denom)),)

    return record(out, (v,), backward_rule, "l2_normalize")


def euclidean_distance(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ShapeError(f"euclidean_distance: shapes {a.data.shape} vs {b.data.shape}")
    diff = a.data - b.data
    dist = float(np.linalg.norm(diff))

    def backward_rule(g):
        if dist == 0.0:
            ga = np.zeros_like(diff)
        else:
            ga = (float(g) / dist) * diff
        return ga, -ga

    return record(np.float64(dist), (a, b), backward_rule, "euclidean_distance")


def log_softmax(x: Tensor) -> Tensor:
    if x.data.ndim != 1:
        raise ShapeError("log_softmax needs a vector")
    shifted = x.data - x.data.max()
    out = shifted - np.log(np.exp(shifted).sum())

    def backward_rule(g):
        return (g - np.exp(out) * g.sum(),)

    return record(out, (x,), backward_rule, "log_softmax")


def softmax(x: Tensor) -> Tensor:
    if x.data.ndim != 1:
        raise ShapeError("softmax needs a vector")
    e = np.exp(x.data - x.data.max())
    s = e / e.sum()

    def backward_rule(g):
        return (s * (g - float((g * s).sum())),)

    return record(s, (x,), backward_rule, "softmax")


# ---------------------------------------------------------------------------
# Convolutions


def _im2col2d(padded: np.ndarray, kh: int, kw: int, sh: int, sw: int):
    windows = sliding_window_view(padded, (kh, kw), axis=(1, 2))[:, ::sh, ::sw]
    c, ho, wo = windows.shape[:3]
    cols = windows.transpose(0, 3, 4, 1, 2).reshape(c * kh * kw, ho * wo)
    return cols, ho, wo


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor,
           stride: tuple[int, int] = (1, 1),
           padding: tuple[int, int] = (0, 0)) -> Tensor:
    """Cross-correlate a (C_in, H, W) input with a (C_out, C_in, kH, kW) kernel."""
    if x.data.ndim != 3:
        raise ShapeError(f"conv2d input must be (C, H, W), got {x.data.shape}")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d kernel must be 4-d, got {kernel.data.shape}")
    c_in, h, w = x.data.shape
    c_out, kc, kh, kw = kernel.data.shape
    if kc != c_in:
        raise ShapeError(f"conv2d: kernel expects {kc} input channels, input has {c_in}")
    if bias.data.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.data.shape}, expected ({c_out},)")
    sh, sw = stride
    ph, pw = padding
    if sh < 1 or sw < 1:
        raise ShapeError("conv2d: strides must be >= 1")
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise ShapeError("conv2d: kernel larger than padded input")
    padded = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw)))
    cols, ho, wo = _im2col2d(padded, kh, kw, sh, sw)
    wmat = kernel.data.reshape(c_out, -1)
    out = (wmat @ cols).reshape(c_out, ho, wo) + bias.data[:, None, None]
    pad_shape = padded.shape
    need_x = x.requires_grad

    def backward_rule(g):
        gm = g.reshape(c_out, -1)
        g_kernel = (gm @ cols.T).reshape(kernel.data.shape)
        g_bias = gm.sum(axis=1)
        if not need_x:
            return None, g_kernel, g_bias
        gcols = (wmat.T @ gm).reshape(c_in, kh, kw, ho, wo)
        gpad = np.zeros(pad_shape)
        for i in range(kh):
            for j in range(kw):
                gpad[:, i:i + sh * ho:sh, j:j + sw * wo:sw] += gcols[:, i, j]
        return gpad[:, ph:ph + h, pw:pw + w], g_kernel, g_bias

    return record(out, (x, kernel, bias), backward_rule, "conv2d")


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate a (C_in, N) input with a (C_out, C_in, k) kernel."""
    if x.data.ndim != 2:
        raise ShapeError(f"conv1d input must be (C, N), got {x.data.shape}")
    if kernel.data.ndim != 3:
        raise ShapeError(f"conv1d kernel must be 3-d, got {kernel.data.shape}")
    c_in, n = x.data.shape
    c_out, kc, k = kernel.data.shape
    if kc != c_in:
        raise ShapeError(f"conv1d: kernel expects {kc} input channels, input has {c_in}")
    if bias.data.shape != (c_out,):
        raise ShapeError(f"conv1d: bias shape {bias.data.shape}, expected ({c_out},)")
    if stride < 1:
        raise ShapeError("conv1d: stride must be >= 1")
    if k > n + 2 * padding:
        raise ShapeError("conv1d: kernel larger than padded input")
    padded = np.pad(x.data, ((0, 0), (padding, padding)))
    windows = sliding_window_view(padded, k, axis=1)[:, ::stride]
    no = windows.shape[1]
    cols = windows.transpose(0, 2, 1).reshape(c_in * k, no)
    wmat = kernel.data.reshape(c_out, -1)
    out = wmat @ cols + bias.data[:, None]
    pad_shape = padded.shape
    need_x = x.requires_grad

    def backward_rule(g):
        g_kernel = (g @ cols.T).reshape(kernel.data.shape)
        g_bias = g.sum(axis=1)
        if not need_x:
            return None, g_kernel, g_bias
        gcols = (wmat.T @ g).reshape(c_in, k, no)
        gpad = np.zeros(pad_shape)
        for o in range(k):
            gpad[:, o:o + stride * no:stride] += gcols[:, o]
        return gpad[:, padding:padding + n], g_kernel, g_bias

    return record(out, (x, kernel, bias), backward_rule, "conv1d")


def transposed_conv1d(x: Tensor, kernel: Tensor, stride: int = 1) -> Tensor:
    """Scatter-add upsampling: out[co, i*stride + o] += x[ci, i] * kernel[ci, co, o]."""
    if x.data.ndim != 2 or kernel.data.ndim != 3:
        raise ShapeError("transposed_conv1d expects (C_in, N) input and (C_in, C_out, k) kernel")
    c_in, n = x.data.shape
    kc, c_out, k = kernel.data.shape
    if kc != c_in:
        raise ShapeError(f"transposed_conv1d: kernel expects {kc} input channels, input has {c_in}")
    if stride < 1:
        raise ShapeError("transposed_conv1d: stride must be >= 1")
    length = (n - 1) * stride + k
    taps = np.tensordot(kernel.data, x.data, axes=([0], [0]))  # (C_out, k, N)
    out = np.zeros((c_out, length))
    for o in range(k):
        out[:, o:o + stride * n:stride] += taps[:, o, :]

    def backward_rule(g):
        gslices = np.stack([g[:, o:o + stride * n:stride] for o in range(k)], axis=1)
        g_x = np.tensordot(kernel.data, gslices, axes=([1, 2], [0, 1]))
        g_kernel = np.tensordot(x.data, gslices, axes=([1], [2]))
        return g_x, g_kernel

    return record(out, (x, kernel), backward_rule, "transposed_conv1d")


# ---------------------------------------------------------------------------
# Pooling


def maxpool(x: Tensor, window: Union[int, tuple[int, int]],
            stride: Union[int, tuple[int, int], None] = None) -> Tensor:
    """Max pooling with floor semantics (partial trailing windows dropped).

    An int window pools the last axis, a pair pools the last two axes; any
    leading axes are carried through. The gradient routes to the first
    (lowest-index) maximum of each window.
    """
    if isinstance(window, tuple):
        return _maxpool2d(x, window, window if stride is None else stride)
    return _maxpool1d(x, window, window if stride is None else int(stride))


def _maxpool1d(x: Tensor, w: int, s: int) -> Tensor:
    arr = x.data
    if arr.ndim == 0:
        raise ShapeError("maxpool needs at least one axis")
    lead = arr.shape[:-1]
    a = arr.reshape(-1, arr.shape[-1])
    rows, extent = a.shape
    if w < 1 or s < 1:
        raise ShapeError("maxpool: window and stride must be >= 1")
    if w > extent:
        raise ShapeError(f"maxpool: window {w} exceeds extent {extent}")
    n_out = (extent - w) // s + 1
    best = a[:, 0:s * n_out:s].copy()
    idx = np.broadcast_to(np.arange(0, s * n_out, s), best.shape).copy()
    for o in range(1, w):
        cand = a[:, o:o + s * n_out:s]
        better = cand > best
        best = np.where(better, cand, best)
        idx = np.where(better, np.arange(o, o + s * n_out, s)[None, :], idx)
    out = best.reshape(*lead, n_out)

    def backward_rule(g):
        ga = np.zeros_like(a)
        row_ids = np.repeat(np.arange(rows), n_out)
        np.add.at(ga, (row_ids, idx.reshape(-1)), g.reshape(rows, n_out).reshape(-1))
        return (ga.reshape(arr.shape),)

    return record(out, (x,), backward_rule, "maxpool1d")


def _maxpool2d(x: Tensor, window: tuple[int, int], stride: tuple[int, int]) -> Tensor:
    arr = x.data
    if arr.ndim < 2:
        raise ShapeError("2-d maxpool needs at least two axes")
    wh, ww = window
    sh, sw = stride
    lead = arr.shape[:-2]
    h, w = arr.shape[-2:]
    a = arr.reshape(-1, h, w)
    channels = a.shape[0]
    if wh < 1 or ww < 1 or sh < 1 or sw < 1:
        raise ShapeError("maxpool: window and stride must be >= 1")
    if wh > h or ww > w:
        raise ShapeError(f"maxpool: window {window} exceeds extent {(h, w)}")
    ho = (h - wh) // sh + 1
    wo = (w - ww) // sw + 1
    best = None
    idx = None
    for i in range(wh):
        for j in range(ww):
            cand = a[:, i:i + sh * ho:sh, j:j + sw * wo:sw]
            flat_pos = (i + sh * np.arange(ho))[:, None] * w + (j + sw * np.arange(wo))[None, :]
            if best is None:
                best = cand.copy()
                idx = np.broadcast_to(flat_pos, cand.shape).copy()
            else:
                better = cand > best
                best = np.where(better, cand, best)
                idx = np.where(better, flat_pos[None], idx)
    out = best.reshape(*lead, ho, wo)

    def backward_rule(g):
        ga = np.zeros((channels, h * w))
        row_ids = np.repeat(np.arange(channels), ho * wo)
        np.add.at(ga, (row_ids, idx.reshape(channels, -1).reshape(-1)),
                  g.reshape(channels, -1).reshape(-1))
        return (ga.reshape(arr.shape),)

    return record(out, (x,), backward_rule, "maxpool2d")
