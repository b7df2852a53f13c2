"""Dense tensors with reverse-mode automatic differentiation.

Covers exactly the operations the captioning stack needs: elementwise
arithmetic, (optionally batched) matmul, grouped 2-d convolution, layer
norm, softmax / log-softmax, exact-erf GELU, embedding lookup, adaptive
average pooling, reductions, and shape moves. float32 is the training
dtype; float64 is the verification dtype used by gradient checks.

Convolution uses cross-correlation semantics (no kernel flip). No op
mutates its inputs; tensors are safe to share read-only across threads.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from typing import Callable, Iterable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf


class TensorError(ValueError):
    """Base class for tensor contract violations."""


class ShapeError(TensorError):
    """Operand shapes are incompatible with the requested op."""


class GroupError(TensorError):
    """Convolution group count does not divide the channel counts."""


class DtypeError(TensorError):
    """Mixed or unsupported dtypes."""


class ContractError(TensorError):
    """An op precondition other than shape/dtype was violated."""


class WeightFormatError(TensorError):
    """Malformed weight file."""


_SUPPORTED = (np.float32, np.float64)

# When true, every op asserts a finite output given finite inputs.
# Off by default; the test suite switches it on.
_check_finite = False


def set_finite_checks(enabled: bool) -> None:
    global _check_finite
    _check_finite = bool(enabled)


_grad_stack = [True]


@contextmanager
def no_grad():
    """Disable graph recording (teacher forwards, generation loops)."""
    _grad_stack.append(False)
    try:
        yield
    finally:
        _grad_stack.pop()


def grad_enabled() -> bool:
    return _grad_stack[-1]


class Tensor:
    """Row-major numeric array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _SUPPORTED:
            if not np.issubdtype(arr.dtype, np.number) and arr.dtype != np.bool_:
                raise DtypeError(f"unsupported dtype {arr.dtype}")
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable[[], None] | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() on tensor of size {self.size}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("tensor/tensor division is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def backward(self):
        backward(self)


# ---------------------------------------------------------------------
# graph plumbing


def _wrap(x, dtype) -> Tensor:
    """Promote a constant (scalar or ndarray) to a non-grad tensor of `dtype`."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype), requires_grad=False)


def _require_same_dtype(*tensors: Tensor) -> None:
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise DtypeError(f"mixed dtypes {dt} and {t.dtype}; cast explicitly")


def _node(data: np.ndarray, parents: Iterable[Tensor], backward: Callable[["Tensor"], None]) -> Tensor:
    # _backward takes the node itself: storing a bound closure over the
    # output would create a reference cycle and leave whole graphs to
    # the cyclic collector
    parents = tuple(parents)
    out = Tensor(data)
    if _check_finite and all(np.isfinite(p.data).all() for p in parents):
        if not np.isfinite(data).all():
            raise ContractError("non-finite output from finite inputs")
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _accum(p: Tensor, g: np.ndarray) -> None:
    if not p.requires_grad:
        return
    g = np.asarray(g, dtype=p.dtype)
    if g.shape != p.data.shape:
        g = g.reshape(p.data.shape)
    if p.grad is None:
        p.grad = g.copy() if g.base is not None else g
    else:
        p.grad = p.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gd, sd) in enumerate(zip(g.shape, shape)):
        if sd == 1 and gd != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Tape:
    """Topological ordering of the graph reachable from a root tensor.

    Node inputs always precede the node; a backward sweep visits each
    node exactly once in reverse. Single-owner, single-threaded.
    """

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.nodes = order

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf."""
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not require grad")
    loss.grad = np.ones_like(loss.data)
    for t in reversed(Tape(loss).nodes):
        if t._backward is not None:
            t._backward(t)


# ---------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    _require_same_dtype(a, b)

    def back(out):
        if a.requires_grad:
            _accum(a, _unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(out.grad, b.shape))

    return _node(a.data + b.data, (a, b), back)


def sub(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    _require_same_dtype(a, b)

    def back(out):
        if a.requires_grad:
            _accum(a, _unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-out.grad, b.shape))

    return _node(a.data - b.data, (a, b), back)


def mul(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    _require_same_dtype(a, b)

    def back(out):
        if a.requires_grad:
            _accum(a, _unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(out.grad * a.data, b.shape))

    return _node(a.data * b.data, (a, b), back)


def neg(a: Tensor) -> Tensor:
    def back(out):
        _accum(a, -out.grad)

    return _node(-a.data, (a,), back)


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)

    def back(out):
        _accum(a, out.grad * p * a.data ** (p - 1.0))

    return _node(a.data**p, (a,), back)


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-error-function GELU: x * Phi(x)."""
    x = a.data
    phi = 0.5 * (1.0 + erf(x / np.sqrt(2.0, dtype=x.dtype)))

    def back(out):
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        _accum(a, out.grad * (phi + x * pdf).astype(x.dtype))

    return _node((x * phi).astype(x.dtype), (a,), back)


# ---------------------------------------------------------------------
# reductions and shape moves


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def back(out):
        g = out.grad
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(ax % a.ndim for ax in axes)
            for ax in sorted(axes):
                g = np.expand_dims(g, ax)
        _accum(a, np.broadcast_to(g, a.shape))

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), back)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    def back(out):
        _accum(a, out.grad.reshape(a.shape))

    return _node(a.data.reshape(shape), (a,), back)


def transpose(a: Tensor, axes=None) -> Tensor:
    def back(out):
        inv = None if axes is None else np.argsort(axes)
        _accum(a, out.grad.transpose(inv))

    return _node(a.data.transpose(axes), (a,), back)


def take(a: Tensor, idx) -> Tensor:
    """Basic/fancy indexing with scatter-add backward."""

    def back(out):
        g = np.zeros_like(a.data)
        np.add.at(g, idx, out.grad)
        _accum(a, g)

    return _node(a.data[idx], (a,), back)


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup table[ids]; backward scatter-adds into the table."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractError("gather_rows expects integer ids")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"ids out of range for table with {table.shape[0]} rows")

    def back(out):
        g = np.zeros_like(table.data)
        np.add.at(g, ids, out.grad)
        _accum(table, g)

    return _node(table.data[ids], (table,), back)


def take_along_last(a: Tensor, ids: np.ndarray) -> Tensor:
    """out[...] = a[..., ids[...]]; ids.shape == a.shape[:-1]."""
    ids = np.asarray(ids)
    if ids.shape != a.shape[:-1]:
        raise ShapeError(f"ids shape {ids.shape} != {a.shape[:-1]}")
    grid = np.ix_(*[np.arange(n) for n in ids.shape]) if ids.ndim else ()

    def back(out):
        g = np.zeros_like(a.data)
        np.add.at(g, grid + (ids,), out.grad)
        _accum(a, g)

    return _node(np.take_along_axis(a.data, ids[..., None], axis=-1)[..., 0], (a,), back)


# ---------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading axes broadcast (numpy semantics)."""
    if not isinstance(b, Tensor):
        b = _wrap(b, a.dtype)
    _require_same_dtype(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul expects rank >= 2 operands")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")

    def back(out):
        g = out.grad
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _node(a.data @ b.data, (a, b), back)


# ---------------------------------------------------------------------
# normalization and activation over the last axis


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax; rows sum to 1."""
    x = a.data
    y = x - x.max(axis=axis, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=axis, keepdims=True)

    def back(out):
        g = out.grad
        tmp = g * y
        s = tmp.sum(axis=axis, keepdims=True)
        np.subtract(g, s, out=tmp)
        tmp *= y
        _accum(a, tmp)

    return _node(y, (a,), back)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    z = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    z -= lse

    def back(out):
        g = out.grad
        tmp = np.exp(z)
        tmp *= g.sum(axis=axis, keepdims=True)
        np.subtract(g, tmp, out=tmp)
        _accum(a, tmp)

    return _node(z, (a,), back)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean/unit-variance over the last axis, then affine.

    Uses population variance (divide by d), the normalization-layer
    convention.
    """
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"gamma/beta must have shape ({d},)")
    _require_same_dtype(a, gamma, beta)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def back(out):
        g = out.grad
        lead = tuple(range(g.ndim - 1))
        _accum(gamma, (g * xhat).sum(axis=lead))
        _accum(beta, g.sum(axis=lead))
        gx = g * gamma.data
        _accum(
            a,
            inv
            * (
                gx
                - gx.mean(axis=-1, keepdims=True)
                - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            ),
        )

    return _node(y, (a, gamma, beta), back)


# ---------------------------------------------------------------------
# convolution and pooling


def _conv_out_dim(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """Grouped 2-d cross-correlation.

    x: [C,H,W] or [B,C,H,W]; w: [C_out, C_in/groups, kH, kW].
    Output spatial size: floor((H + 2*pad - kH)/stride) + 1.
    """
    if w.ndim != 4:
        raise ShapeError(f"kernel must be rank 4, got {w.shape}")
    squeeze = x.ndim == 3
    if x.ndim not in (3, 4):
        raise ShapeError(f"input must be [C,H,W] or [B,C,H,W], got {x.shape}")
    _require_same_dtype(x, w)
    c_in = x.shape[-3]
    c_out, c_k, kh, kw = w.shape
    if groups < 1 or c_in % groups or c_out % groups:
        raise GroupError(f"groups={groups} must divide C_in={c_in} and C_out={c_out}")
    if c_k != c_in // groups:
        raise ShapeError(f"kernel expects {c_k} channels per group, input provides {c_in // groups}")
    if b is not None and b.shape != (c_out,):
        raise ShapeError(f"bias must have shape ({c_out},)")

    xd = x.data[None] if squeeze else x.data
    bsz, _, h, wd_ = xd.shape
    ho = _conv_out_dim(h, kh, stride, padding)
    wo = _conv_out_dim(wd_, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} does not fit input {h}x{wd_} with padding {padding}")

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))

    if groups == c_in == c_out:
        # depthwise fast path: shifted multiply-adds instead of a
        # k*k-fold im2col expansion
        wd = w.data[:, 0]  # [C, kh, kw]
        out = np.zeros((bsz, c_in, ho, wo), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                out += wd[:, i, j][None, :, None, None] * xp[
                    :, :, i : i + ho * stride : stride, j : j + wo * stride : stride
                ]
        if b is not None:
            out += b.data[:, None, None]

        def back_dw(o):
            g = o.grad if not squeeze else o.grad[None]
            if w.requires_grad:
                gw = np.empty_like(w.data)
                for i in range(kh):
                    for j in range(kw):
                        gw[:, 0, i, j] = (
                            g * xp[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride]
                        ).sum(axis=(0, 2, 3))
                _accum(w, gw)
            if b is not None and b.requires_grad:
                _accum(b, g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                dxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += (
                            wd[:, i, j][None, :, None, None] * g
                        )
                dx = dxp[:, :, padding : padding + h, padding : padding + wd_]
                _accum(x, dx[0] if squeeze else dx)

        parents = (x, w) if b is None else (x, w, b)
        return _node(out[0] if squeeze else out, parents, back_dw)

    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # [B, C, Ho, Wo, kh, kw] -> [B, g, Ho*Wo, (C/g)*kh*kw]
    cg, mg = c_in // groups, c_out // groups
    cols = np.ascontiguousarray(
        win.reshape(bsz, groups, cg, ho, wo, kh, kw).transpose(0, 1, 3, 4, 2, 5, 6)
    ).reshape(bsz, groups, ho * wo, cg * kh * kw)
    wmat = w.data.reshape(groups, mg, cg * kh * kw)
    out = cols @ wmat.transpose(0, 2, 1)  # [B, g, Ho*Wo, Mg]
    out = out.transpose(0, 1, 3, 2).reshape(bsz, c_out, ho, wo)
    if b is not None:
        out = out + b.data[:, None, None]

    def back(o):
        g = o.grad if not squeeze else o.grad[None]
        gmat = g.reshape(bsz, groups, mg, ho * wo).transpose(0, 1, 3, 2)  # [B,g,L,Mg]
        if w.requires_grad:
            _accum(w, np.einsum("bglm,bglk->gmk", gmat, cols).reshape(w.shape))
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(bsz, groups, ho, wo, cg, kh, kw)
            dcols = dcols.transpose(0, 1, 4, 2, 3, 5, 6).reshape(bsz, c_in, ho, wo, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += dcols[
                        :, :, :, :, i, j
                    ]
            dx = dxp[:, :, padding : padding + h, padding : padding + wd_]
            _accum(x, dx[0] if squeeze else dx)

    parents = (x, w) if b is None else (x, w, b)
    return _node(out[0] if squeeze else out, parents, back)


def adaptive_avg_pool2d(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    """Average pooling to a fixed output grid, any input resolution."""
    squeeze = x.ndim == 3
    if x.ndim not in (3, 4):
        raise ShapeError(f"input must be [C,H,W] or [B,C,H,W], got {x.shape}")
    oh, ow = out_hw
    xd = x.data[None] if squeeze else x.data
    bsz, c, h, w = xd.shape
    hb = [(i * h // oh, -(-(i + 1) * h // oh)) for i in range(oh)]
    wb = [(j * w // ow, -(-(j + 1) * w // ow)) for j in range(ow)]
    out = np.empty((bsz, c, oh, ow), dtype=xd.dtype)
    for i, (h0, h1) in enumerate(hb):
        for j, (w0, w1) in enumerate(wb):
            out[:, :, i, j] = xd[:, :, h0:h1, w0:w1].mean(axis=(2, 3))

    def back(o):
        g = o.grad if not squeeze else o.grad[None]
        dx = np.zeros_like(xd)
        for i, (h0, h1) in enumerate(hb):
            for j, (w0, w1) in enumerate(wb):
                dx[:, :, h0:h1, w0:w1] += g[:, :, i : i + 1, j : j + 1] / (
                    (h1 - h0) * (w1 - w0)
                )
        _accum(x, dx[0] if squeeze else dx)

    return _node(out[0] if squeeze else out, (x,), back)


# ---------------------------------------------------------------------
# verification harness


def grad_check(f: Callable[..., Tensor], inputs: list[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences.

    Every input must be float64 and require grad. Relative error is
    |ad - fd| / (|ad| + |fd| + 1e-4); the additive floor keeps
    finite-difference noise on near-zero gradients from dominating.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise ContractError("grad_check requires float64 inputs")
        if not t.requires_grad:
            raise ContractError("grad_check inputs must require grad")
        t.zero_grad()
    loss = f(*inputs)
    if loss.size != 1:
        raise ContractError("grad_check target must be scalar")
    backward(loss)
    worst = 0.0
    for t in inputs:
        ad = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        fd = np.empty_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(*inputs).item()
            flat[i] = orig - eps
            lo = f(*inputs).item()
            flat[i] = orig
            fd[i] = (hi - lo) / (2.0 * eps)
        fd = fd.reshape(t.data.shape)
        rel = np.abs(ad - fd) / (np.abs(ad) + np.abs(fd) + 1e-4)
        worst = max(worst, float(rel.max()))
    return worst


# ---------------------------------------------------------------------
# weight serialization
#
# Flat little-endian binary, entries sorted by name:
#   u32 name length | name (UTF-8) | u8 dtype (0=f32, 1=f64)
#   | u64 rank | u64 dims... | row-major payload

_DTYPE_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_weights(path, weights: Mapping[str, "Tensor | np.ndarray"]) -> None:
    with open(path, "wb") as fh:
        for name in sorted(weights):
            arr = weights[name]
            arr = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
            if arr.dtype.type not in _SUPPORTED:
                raise WeightFormatError(f"{name}: unsupported dtype {arr.dtype}")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", _DTYPE_CODE[arr.dtype]))
            fh.write(struct.pack("<Q", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def load_weights(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        blob = fh.read()
    pos = 0

    def need(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise WeightFormatError(f"truncated weight file: {what} at byte {pos}")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    while pos < len(blob):
        (nlen,) = struct.unpack("<I", need(4, "name length"))
        name = need(nlen, "name").decode("utf-8")
        (code,) = struct.unpack("<B", need(1, "dtype byte"))
        if code not in _CODE_DTYPE:
            raise WeightFormatError(f"unknown dtype code {code} at byte {pos - 1}")
        (rank,) = struct.unpack("<Q", need(8, "rank"))
        dims = struct.unpack(f"<{rank}Q", need(8 * rank, "dims"))
        dt = _CODE_DTYPE[code]
        count = int(np.prod(dims)) if rank else 1
        payload = need(count * dt.itemsize, f"payload of {name!r}")
        out[name] = np.frombuffer(payload, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    return out
