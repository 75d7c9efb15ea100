"""Dense tensors with reverse-mode automatic differentiation.

Every trainable part of the pipeline runs on this module. Tensors wrap a
numpy array; applying an operation records the inputs and a backward rule
on the resulting node, and ``backward`` replays those rules in reverse
topological order. Gradients accumulate across backward calls until
explicitly zeroed.

Shape discipline is strict: elementwise operations accept equal shapes or
a scalar (a Python number or a single-element tensor); any other mix is a
``ShapeError``. 64-bit values are the default; float32 storage is meant
for training speed only.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, NumericError, ShapeError

DEFAULT_DTYPE = np.float64

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable recording of backward rules inside the context (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense n-dimensional array that can participate in backprop.

    ``grad`` is populated (and accumulated) by ``backward``; it always has
    the same shape as ``values``.
    """

    __slots__ = ("values", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, values, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(values, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy(), requires_grad=False)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.values.dtype}, requires_grad={self.requires_grad}{tag})"

    # Operator sugar; scalars may be Python numbers or 1-element tensors.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(other) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _result(values, parents: Sequence[Tensor], backward: Callable | None) -> Tensor:
    out = Tensor(values)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _is_scalar_operand(x) -> bool:
    return isinstance(x, (int, float)) or (isinstance(x, Tensor) and x.values.size == 1)


def _check_same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not match")


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        out = _result(a.values + b, [a], None)
        out._backward = lambda g: (g,)
        return out
    if a.shape == b.shape:
        def bwd(g):
            return g, g
        return _result(a.values + b.values, [a, b], bwd)
    if _is_scalar_operand(b):
        def bwd(g):
            return g, np.sum(g).reshape(b.shape)
        return _result(a.values + b.values.reshape(()), [a, b], bwd)
    if _is_scalar_operand(a):
        return add(b, a)
    raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not match")


def neg(a: Tensor) -> Tensor:
    return _result(-a.values, [a], lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return _result(a.values * b, [a], lambda g: (g * b,))
    if a.shape == b.shape:
        def bwd(g):
            return g * b.values, g * a.values
        return _result(a.values * b.values, [a, b], bwd)
    if _is_scalar_operand(b):
        s = b.values.reshape(())
        def bwd(g):
            return g * s, np.sum(g * a.values).reshape(b.shape)
        return _result(a.values * s, [a, b], bwd)
    if _is_scalar_operand(a):
        return mul(b, a)
    raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not match")


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.values < 0):
        raise NumericError("sqrt: negative input")
    y = np.sqrt(a.values)
    def bwd(g):
        return (g * 0.5 / np.maximum(y, 1e-300),)
    return _result(y, [a], bwd)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    y = np.clip(a.values, lo, hi)
    inside = (a.values > lo) & (a.values < hi)
    def bwd(g):
        return (g * inside,)
    return _result(y, [a], bwd)


def where(mask, a: Tensor, b: Tensor) -> Tensor:
    """Select from ``a`` where ``mask`` is true, else ``b``. The mask is data, not a tensor."""
    mask = np.asarray(mask, dtype=bool)
    _check_same_shape("where", a, b)
    if mask.shape != a.shape:
        raise ShapeError(f"where: mask shape {mask.shape} does not match {a.shape}")
    def bwd(g):
        return g * mask, g * ~mask
    return _result(np.where(mask, a.values, b.values), [a, b], bwd)


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    y = np.where(a.values >= 0, a.values, slope * a.values)
    def bwd(g):
        return (g * np.where(a.values >= 0, 1.0, slope),)
    return _result(y, [a], bwd)


# ---------------------------------------------------------------------------
# reductions and shape ops


def tensor_sum(a: Tensor) -> Tensor:
    def bwd(g):
        return (np.full(a.shape, g.reshape(()), dtype=a.values.dtype),)
    return _result(np.sum(a.values).reshape(()), [a], bwd)


def tensor_mean(a: Tensor) -> Tensor:
    n = a.values.size
    def bwd(g):
        return (np.full(a.shape, g.reshape(()) / n, dtype=a.values.dtype),)
    return _result(np.mean(a.values).reshape(()), [a], bwd)


def mean_pool(a: Tensor, axis: int) -> Tensor:
    n = a.shape[axis]
    def bwd(g):
        return (np.repeat(np.expand_dims(g, axis), n, axis=axis) / n,)
    return _result(np.mean(a.values, axis=axis), [a], bwd)


def global_avg_pool(a: Tensor) -> Tensor:
    """Mean over every axis but the first: [C, ...] -> [C]."""
    if a.values.ndim < 2:
        raise ShapeError(f"global_avg_pool: need at least 2 dims, got shape {a.shape}")
    spatial_axes = tuple(range(1, a.values.ndim))
    n = int(np.prod([a.shape[i] for i in spatial_axes]))
    def bwd(g):
        return (np.broadcast_to(g.reshape((a.shape[0],) + (1,) * len(spatial_axes)), a.shape) / n,)
    return _result(np.mean(a.values, axis=spatial_axes), [a], bwd)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.values.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    def bwd(g):
        return (g.reshape(a.shape),)
    return _result(a.values.reshape(shape), [a], bwd)


def transpose(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise ShapeError(f"transpose: need a matrix, got shape {a.shape}")
    def bwd(g):
        return (g.T,)
    return _result(a.values.T.copy(), [a], bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    if not (0 <= start and start + length <= a.shape[axis]):
        raise ShapeError(
            f"narrow: slice [{start}, {start + length}) out of range for axis {axis} of shape {a.shape}"
        )
    index = tuple(slice(None) if i != axis else slice(start, start + length) for i in range(a.values.ndim))
    def bwd(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[index] = g
        return (full,)
    return _result(a.values[index].copy(), [a], bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ContractError("concat: empty input list")
    base = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(base) or any(
            i != axis and t.shape[i] != base[i] for i in range(len(base))
        ):
            raise ShapeError(f"concat: shape {t.shape} incompatible with {base} along axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    def bwd(g):
        return tuple(
            g[tuple(slice(None) if i != axis else slice(bounds[j], bounds[j + 1])
                    for i in range(len(base)))]
            for j in range(len(tensors))
        )
    return _result(np.concatenate([t.values for t in tensors], axis=axis), list(tensors), bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ShapeError(f"matmul: need matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree: {a.shape} x {b.shape}")
    def bwd(g):
        ga = g @ b.values.T if a.requires_grad else None
        gb = a.values.T @ g if b.requires_grad else None
        return ga, gb
    return _result(a.values @ b.values, [a, b], bwd)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map of a vector: y = W x + b with W of shape [out, in]."""
    if x.values.ndim != 1 or w.values.ndim != 2 or w.shape[1] != x.shape[0]:
        raise ShapeError(f"linear: incompatible shapes W{w.shape}, x{x.shape}")
    y = w.values @ x.values
    parents = [x, w]
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeError(f"linear: bias shape {b.shape} does not match out dim {w.shape[0]}")
        y = y + b.values
        parents.append(b)
    def bwd(g):
        gx = w.values.T @ g if x.requires_grad else None
        gw = np.outer(g, x.values) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g
    return _result(y, parents, bwd)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax of a matrix, computed with max subtraction."""
    if a.values.ndim != 2:
        raise ShapeError(f"softmax_rows: need a matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a.values)):
        raise NumericError("softmax_rows: non-finite input")
    shifted = a.values - np.max(a.values, axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=1, keepdims=True)
    def bwd(g):
        return (y * (g - np.sum(g * y, axis=1, keepdims=True)),)
    return _result(y, [a], bwd)


def layer_norm(a: Tensor, axis, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean and unit variance along ``axis`` (no affine part)."""
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    mean = np.mean(a.values, axis=axes, keepdims=True)
    var = np.var(a.values, axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (a.values - mean) * inv
    def bwd(g):
        gm = np.mean(g, axis=axes, keepdims=True)
        gym = np.mean(g * y, axis=axes, keepdims=True)
        return (inv * (g - gm - y * gym),)
    return _result(y, [a], bwd)


def affine(a: Tensor, gain: Tensor, bias: Tensor, axis: int) -> Tensor:
    """Per-index scale and shift along one axis: y = a * gain + bias."""
    n = a.shape[axis]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(
            f"affine: gain {gain.shape} / bias {bias.shape} must be [{n}] for axis {axis} of {a.shape}"
        )
    expand = tuple(slice(None) if i == axis else None for i in range(a.values.ndim))
    g_e = gain.values[expand]
    b_e = bias.values[expand]
    other_axes = tuple(i for i in range(a.values.ndim) if i != axis)
    def bwd(g):
        ga = g * g_e if a.requires_grad else None
        ggain = np.sum(g * a.values, axis=other_axes) if gain.requires_grad else None
        gbias = np.sum(g, axis=other_axes) if bias.requires_grad else None
        return ga, ggain, gbias
    return _result(a.values * g_e + b_e, [a, gain, bias], bwd)


def l2_normalize_rows(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row of a matrix to unit Euclidean norm."""
    if a.values.ndim != 2:
        raise ShapeError(f"l2_normalize_rows: need a matrix, got shape {a.shape}")
    norms = np.sqrt(np.sum(a.values * a.values, axis=1, keepdims=True) + eps)
    y = a.values / norms
    def bwd(g):
        dot = np.sum(g * y, axis=1, keepdims=True)
        return ((g - y * dot) / norms,)
    return _result(y, [a], bwd)


# ---------------------------------------------------------------------------
# convolutions


def _conv_out_len(length: int, k: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - k) // stride + 1


def conv1d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0,
           bias: Tensor | None = None) -> Tensor:
    """1-D cross-correlation: x [C_in, L], w [C_out, C_in, k] -> [C_out, L']."""
    if x.values.ndim != 2 or w.values.ndim != 3:
        raise ShapeError(f"conv1d: need x [C_in, L] and w [C_out, C_in, k], got {x.shape}, {w.shape}")
    c_in, length = x.shape
    c_out, c_in_w, k = w.shape
    if c_in_w != c_in:
        raise ShapeError(f"conv1d: channel mismatch: x {x.shape} vs w {w.shape}")
    if stride < 1:
        raise ContractError(f"conv1d: stride must be >= 1, got {stride}")
    if length + 2 * padding < k:
        raise ShapeError(f"conv1d: kernel {k} larger than padded input {length + 2 * padding}")
    out_len = _conv_out_len(length, k, stride, padding)

    xp = np.pad(x.values, ((0, 0), (padding, padding))) if padding else x.values
    if c_in == 1 and k % stride == 0 and k > stride:
        return _conv1d_chunked(x, w, xp, stride, padding, out_len, bias)
    win = sliding_window_view(xp, k, axis=1)[:, ::stride, :]          # [C_in, L', k]
    cols = win.transpose(0, 2, 1).reshape(c_in * k, out_len)
    y = w.values.reshape(c_out, c_in * k) @ cols
    parents = [x, w]
    if bias is not None:
        if bias.shape != (c_out,):
            raise ShapeError(f"conv1d: bias shape {bias.shape} does not match C_out {c_out}")
        y = y + bias.values[:, None]
        parents.append(bias)

    def bwd(g):
        gw = (g @ cols.T).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (w.values.reshape(c_out, c_in * k).T @ g).reshape(c_in, k, out_len)
            dxp = np.zeros((c_in, length + 2 * padding), dtype=g.dtype)
            for j in range(k):
                dxp[:, j:j + stride * out_len:stride] += dcols[:, j, :]
            gx = dxp[:, padding:padding + length] if padding else dxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=1)

    return _result(y, parents, bwd)


def _conv1d_chunked(x: Tensor, w: Tensor, xp: np.ndarray, stride: int, padding: int,
                    out_len: int, bias: Tensor | None) -> Tensor:
    """Single-channel wide conv with stride dividing k: contiguous chunk GEMMs.

    The padded signal is viewed as stride-sized chunks; window t is the
    concatenation of r = k/stride consecutive chunks, so the convolution is a
    sum of r dense products on contiguous slices (no strided gather).
    """
    c_out, _, k = w.shape
    r = k // stride
    length = x.shape[1]
    n_chunks = xp.shape[1] // stride
    chunks = xp[0, :n_chunks * stride].reshape(n_chunks, stride)
    w_parts = w.values.reshape(c_out, r, stride)
    y = np.zeros((out_len, c_out), dtype=xp.dtype)
    for j in range(r):
        y += chunks[j:j + out_len] @ w_parts[:, j, :].T
    y = np.ascontiguousarray(y.T)
    parents = [x, w]
    if bias is not None:
        if bias.shape != (c_out,):
            raise ShapeError(f"conv1d: bias shape {bias.shape} does not match C_out {c_out}")
        y = y + bias.values[:, None]
        parents.append(bias)

    def bwd(g):
        gw = None
        if w.requires_grad:
            gw = np.empty((c_out, r, stride), dtype=g.dtype)
            for j in range(r):
                gw[:, j, :] = g @ chunks[j:j + out_len]
            gw = gw.reshape(w.shape)
        gx = None
        if x.requires_grad:
            dchunks = np.zeros((n_chunks, stride), dtype=g.dtype)
            gt = np.ascontiguousarray(g.T)
            for j in range(r):
                dchunks[j:j + out_len] += gt @ w_parts[:, j, :]
            dxp = np.zeros(xp.shape[1], dtype=g.dtype)
            dxp[:n_chunks * stride] = dchunks.reshape(-1)
            gx = dxp[padding:padding + length][None, :] if padding else dxp[None, :]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=1)

    return _result(y, parents, bwd)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0,
           bias: Tensor | None = None, groups: int = 1) -> Tensor:
    """2-D cross-correlation: x [C_in, H, W], w [C_out, C_in/groups, kh, kw].

    Supports the standard case (groups=1, covers pointwise 1x1) and the
    depthwise case (groups == C_in == C_out).
    """
    if x.values.ndim != 3 or w.values.ndim != 4:
        raise ShapeError(f"conv2d: need x [C,H,W] and w [O,I,kh,kw], got {x.shape}, {w.shape}")
    c_in, h, wd = x.shape
    c_out, c_per_g, kh, kw = w.shape
    if stride < 1:
        raise ContractError(f"conv2d: stride must be >= 1, got {stride}")
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ShapeError(f"conv2d: kernel ({kh},{kw}) larger than padded input")
    depthwise = groups == c_in
    if depthwise:
        if c_out != c_in or c_per_g != 1:
            raise ShapeError(f"conv2d: depthwise needs w [C,1,kh,kw] with C={c_in}, got {w.shape}")
    elif groups != 1:
        raise ContractError(f"conv2d: groups must be 1 or C_in, got {groups}")
    elif c_per_g != c_in:
        raise ShapeError(f"conv2d: channel mismatch: x {x.shape} vs w {w.shape}")
    oh = _conv_out_len(h, kh, stride, padding)
    ow = _conv_out_len(wd, kw, stride, padding)

    xp = np.pad(x.values, ((0, 0), (padding, padding), (padding, padding))) if padding else x.values

    def in_slice(i, j):
        return xp[:, i:i + stride * oh:stride, j:j + stride * ow:stride]

    parents = [x, w]
    if depthwise:
        # per-offset multiply-add: avoids gathering kh*kw windows per position
        y = np.zeros((c_in, oh, ow), dtype=xp.dtype)
        for i in range(kh):
            for j in range(kw):
                y += w.values[:, 0, i, j][:, None, None] * in_slice(i, j)
    elif kh == 1 and kw == 1:
        cols = in_slice(0, 0).reshape(c_in, oh * ow)
        y = (w.values.reshape(c_out, c_in) @ cols).reshape(c_out, oh, ow)
    else:
        # im2col by stacking shifted slices (contiguous writes), one GEMM
        cols = np.empty((kh * kw * c_in, oh * ow), dtype=xp.dtype)
        for i in range(kh):
            for j in range(kw):
                idx = i * kw + j
                cols[idx * c_in:(idx + 1) * c_in] = in_slice(i, j).reshape(c_in, oh * ow)
        w_mat = np.ascontiguousarray(w.values.transpose(0, 2, 3, 1)).reshape(c_out, kh * kw * c_in)
        y = (w_mat @ cols).reshape(c_out, oh, ow)
    if bias is not None:
        if bias.shape != (c_out,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} does not match C_out {c_out}")
        y = y + bias.values[:, None, None]
        parents.append(bias)

    def unpad(dxp):
        return dxp[:, padding:padding + h, padding:padding + wd] if padding else dxp

    def bwd(g):
        gw = None
        gx = None
        if depthwise:
            if w.requires_grad:
                gw = np.empty((c_in, 1, kh, kw), dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gw[:, 0, i, j] = (g * in_slice(i, j)).sum(axis=(1, 2))
            if x.requires_grad:
                dxp = np.zeros(xp.shape, dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, i:i + stride * oh:stride, j:j + stride * ow:stride] += (
                            g * w.values[:, 0, i, j][:, None, None]
                        )
                gx = unpad(dxp)
        elif kh == 1 and kw == 1:
            g2 = g.reshape(c_out, oh * ow)
            pw_cols = in_slice(0, 0).reshape(c_in, oh * ow)
            if w.requires_grad:
                gw = (g2 @ pw_cols.T).reshape(w.shape)
            if x.requires_grad:
                dcols = w.values.reshape(c_out, c_in).T @ g2
                dxp = np.zeros(xp.shape, dtype=g.dtype)
                dxp[:, ::stride, ::stride] = dcols.reshape(c_in, oh, ow)
                gx = unpad(dxp)
        else:
            g2 = g.reshape(c_out, oh * ow)
            if w.requires_grad:
                gw_mat = g2 @ cols.T  # [c_out, kh*kw*c_in]
                gw = np.ascontiguousarray(
                    gw_mat.reshape(c_out, kh, kw, c_in).transpose(0, 3, 1, 2))
            if x.requires_grad:
                dcols = w_mat.T @ g2
                dxp = np.zeros(xp.shape, dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        idx = i * kw + j
                        dxp[:, i:i + stride * oh:stride, j:j + stride * ow:stride] += (
                            dcols[idx * c_in:(idx + 1) * c_in].reshape(c_in, oh, ow)
                        )
                gx = unpad(dxp)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(1, 2))

    return _result(y, parents, bwd)


# ---------------------------------------------------------------------------
# losses


def cross_entropy_with_logits(logits: Tensor, target: int) -> Tensor:
    """Negative log softmax probability of ``target``, stabilized via log-sum-exp."""
    if logits.values.ndim != 1:
        raise ShapeError(f"cross_entropy_with_logits: need a logit vector, got shape {logits.shape}")
    c = logits.shape[0]
    if not (0 <= target < c):
        raise ContractError(f"cross_entropy_with_logits: target {target} out of range [0, {c})")
    if not np.all(np.isfinite(logits.values)):
        raise NumericError("cross_entropy_with_logits: non-finite logits")
    z = logits.values
    m = np.max(z)
    lse = m + math.log(np.sum(np.exp(z - m)))
    def bwd(g):
        p = np.exp(z - lse)
        p[target] -= 1.0
        return (p * g.reshape(()),)
    return _result(np.asarray(lse - z[target]).reshape(()), [logits], bwd)


# ---------------------------------------------------------------------------
# backward engine


def tape(root: Tensor) -> list[Tensor]:
    """Topologically ordered list of grad-requiring nodes reachable from ``root``."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    return order


def _propagate(loss: Tensor, sink):
    """Run the reverse sweep from a scalar loss, handing (node, grad) to ``sink``."""
    if loss.values.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = tape(loss)
    delta: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in reversed(order):
        g = delta.pop(id(node), None)
        if g is None:
            continue
        sink(node, g)
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in delta:
                delta[key] = delta[key] + pg
            else:
                delta[key] = pg


def backward(loss: Tensor):
    """Populate ``grad`` on every grad-requiring tensor reachable from a scalar loss.

    Repeated calls accumulate into existing gradients; call ``zero_grad`` to reset.
    """
    def sink(node, g):
        node.grad = g if node.grad is None else node.grad + g

    _propagate(loss, sink)


def collect_grads(loss: Tensor, targets: Sequence[Tensor]) -> list[np.ndarray | None]:
    """Gradients of a scalar loss w.r.t. ``targets`` without touching any ``grad``.

    Safe for concurrent use on independent graphs that share read-only
    parameter tensors; the caller owns accumulation order.
    """
    wanted = {id(t): i for i, t in enumerate(targets)}
    out: list[np.ndarray | None] = [None] * len(targets)

    def sink(node, g):
        slot = wanted.get(id(node))
        if slot is not None:
            out[slot] = g if out[slot] is None else out[slot] + g

    _propagate(loss, sink)
    return out


def zero_grad(tensors):
    for t in tensors:
        t.zero_grad()


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f, x: Tensor, h: float = 1e-6, max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Compare the analytic gradient of a scalar function against central differences.

    Returns the maximum over checked coordinates of
    |analytic - numeric| / max(1, |numeric|). Large tensors can be spot
    checked by bounding ``max_coords``.
    """
    if h <= 0:
        raise ContractError(f"grad_check: step must be positive, got {h}")
    x.requires_grad = True
    x.zero_grad()
    out = f(x)
    if out.values.size != 1:
        raise ContractError("grad_check: function must be scalar-valued")
    if not np.all(np.isfinite(out.values)):
        raise NumericError("grad_check: non-finite function value")
    backward(out)
    analytic = np.zeros(x.shape) if x.grad is None else x.grad.astype(np.float64)

    flat = x.values.reshape(-1)
    n = flat.size
    if max_coords is not None and n > max_coords:
        rng = rng or np.random.default_rng(0)
        coords = rng.choice(n, size=max_coords, replace=False)
    else:
        coords = np.arange(n)

    worst = 0.0
    a_flat = analytic.reshape(-1)
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x).values.reshape(()))
        flat[i] = orig - h
        fm = float(f(x).values.reshape(()))
        flat[i] = orig
        numeric = (fp - fm) / (2 * h)
        if not math.isfinite(numeric):
            raise NumericError("grad_check: non-finite function value during differencing")
        err = abs(a_flat[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst
