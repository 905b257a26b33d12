"""Minimal dense-tensor reverse-mode automatic differentiation.

Everything is float64. A Tensor wraps a numpy array plus an optional tape
node (parents + backward closure). Gradients are accumulated into
``.grad`` numpy buffers by :func:`backward`, which also frees graph
references as it walks so large training graphs release memory eagerly.

The op set is closed and small on purpose: matmul (with numpy batch
broadcasting), elementwise arithmetic with broadcasting, exp/log/sqrt,
relu/sigmoid/clip, reductions (sum/mean/max), softmax, layer-norm,
reshape/transpose/concat/slicing, permutation gather, bilinear grid
sampling, and a fused binary-cross-entropy-with-logits. Each op's
gradient is checked against central finite differences in the test
suite; :func:`fd_check` is the shared oracle.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .errors import ContractError, NumericError, ShapeError

Array = np.ndarray

# Global switch: when True every op output is scanned for NaN and the
# offending op is named. Off by default (hot loops), enabled by tests
# and by the trainer around loss evaluation.
_NAN_CHECKS = False


def set_nan_checks(enabled: bool) -> None:
    global _NAN_CHECKS
    _NAN_CHECKS = bool(enabled)


def _as_f64(x) -> Array:
    a = np.asarray(x, dtype=np.float64)
    return a


class Tensor:
    """Dense float64 array with an optional reverse-mode tape node."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op",
                 "_grad_owned")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = "leaf"):
        self.data: Array = _as_f64(data)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[Array], None] | None = _backward
        self.op = op
        self._grad_owned = False
        if _NAN_CHECKS and not np.all(np.isfinite(self.data)):
            raise NumericError(f"non-finite values produced by op '{op}'")

    # -- basic introspection ------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> Array:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other)
        return mul(self, power(other, -1.0))

    def __rtruediv__(self, other):
        return mul(_wrap(other), power(self, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs(*ts: Tensor) -> bool:
    return any(t.requires_grad for t in ts)


def _node(data, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    if _needs(*parents):
        return Tensor(data, True, _parents=parents, _backward=backward, op=op)
    return Tensor(data, op=op)


def _accum(t: Tensor, g: Array) -> None:
    """Accumulate a gradient contribution with copy-on-write semantics.

    The first contribution is adopted by reference (closures never mutate
    the arrays they hand over); a second contribution triggers one copy.
    """
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
        t._grad_owned = False
    elif t._grad_owned:
        t.grad += g
    else:
        t.grad = t.grad + g
        t._grad_owned = True


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum gradient g down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- arithmetic ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def bw(g: Array) -> None:
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _node(out, (a, b), bw, "add")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data

    def bw(g: Array) -> None:
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _node(out, (a, b), bw, "mul")


def power(a, p: float) -> Tensor:
    a = _wrap(a)
    p = float(p)
    out = a.data**p

    def bw(g: Array) -> None:
        _accum(a, g * p * a.data ** (p - 1.0))

    return _node(out, (a,), bw, "pow")


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions do not match for shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def bw(g: Array) -> None:
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            _accum(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accum(b, _unbroadcast(gb, b.shape))

    return _node(out, (a, b), bw, "matmul")


def linear(x, w, b=None) -> Tensor:
    """Fused affine map x @ w + b (saves a node and a pass over the output)."""
    x, w = _wrap(x), _wrap(w)
    if x.shape[-1] != w.shape[-2]:
        raise ShapeError(f"linear: input shape {x.shape} does not match weight shape {w.shape}")
    out = x.data @ w.data
    if b is not None:
        out += b.data

    def bw(g: Array) -> None:
        if x.requires_grad:
            _accum(x, g @ w.data.T)
        if w.requires_grad:
            lead = g.reshape(-1, g.shape[-1])
            _accum(w, x.data.reshape(-1, x.shape[-1]).T @ lead)
        if b is not None and b.requires_grad:
            _accum(b, g.reshape(-1, g.shape[-1]).sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, bw, "linear")


def texp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)

    def bw(g: Array) -> None:
        _accum(a, g * out)

    return _node(out, (a,), bw, "exp")


def tlog(a) -> Tensor:
    a = _wrap(a)
    out = np.log(a.data)

    def bw(g: Array) -> None:
        _accum(a, g / a.data)

    return _node(out, (a,), bw, "log")


def tsqrt(a) -> Tensor:
    a = _wrap(a)
    out = np.sqrt(a.data)

    def bw(g: Array) -> None:
        _accum(a, g * 0.5 / out)

    return _node(out, (a,), bw, "sqrt")


def relu(a) -> Tensor:
    a = _wrap(a)
    out = np.maximum(a.data, 0.0)

    def bw(g: Array) -> None:
        _accum(a, g * (a.data > 0.0))

    return _node(out, (a,), bw, "relu")


def _sigmoid_arr(x: Array) -> Array:
    # stable in both tails: sigmoid(x) = 0.5 * (1 + tanh(x/2))
    out = np.tanh(x * 0.5)
    out += 1.0
    out *= 0.5
    return out


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    out = _sigmoid_arr(a.data)

    def bw(g: Array) -> None:
        _accum(a, g * out * (1.0 - out))

    return _node(out, (a,), bw, "sigmoid")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp with pass-through gradient strictly inside [lo, hi]."""
    a = _wrap(a)
    out = np.clip(a.data, lo, hi)

    def bw(g: Array) -> None:
        _accum(a, g * ((a.data >= lo) & (a.data <= hi)))

    return _node(out, (a,), bw, "clip")


# -- reductions ---------------------------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g: Array) -> None:
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).copy() if np.ndim(g) else np.full(a.shape, g))
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg, a.shape))

    return _node(out, (a,), bw, "sum")


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    n = a.size if axis is None else math.prod(
        a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))
    )
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def tmax(a, axis=None, keepdims=False) -> Tensor:
    """Max reduction; gradient routes to the first argmax along the axis."""
    a = _wrap(a)
    out = a.data.max(axis=axis, keepdims=keepdims)

    def bw(g: Array) -> None:
        gg, oo = g, out
        if axis is not None and not keepdims:
            gg = np.expand_dims(g, axis)
            oo = np.expand_dims(out, axis)
        hit = a.data == oo
        if axis is None:
            # route all mass to the first max element
            first = np.zeros(a.shape, dtype=bool)
            first[np.unravel_index(np.argmax(a.data), a.shape)] = True
            _accum(a, np.where(first, gg, 0.0))
            return
        ax = axis if isinstance(axis, int) else axis[0]
        # keep only the first hit along the axis
        first = hit & (np.cumsum(hit, axis=ax) == 1)
        _accum(a, np.where(first, gg, 0.0))

    return _node(out, (a,), bw, "max")


def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    if axis in (-1, a.ndim - 1):
        d = a.shape[-1]
        out = _kernels.softmax_fwd(a.data.reshape(-1, d)).reshape(a.shape)

        def bw_fast(g: Array) -> None:
            dx = _kernels.softmax_bwd(g.reshape(-1, d), out.reshape(-1, d))
            _accum(a, dx.reshape(a.shape))

        return _node(out, (a,), bw_fast, "softmax")

    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g: Array) -> None:
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accum(a, out * (g - dot))

    return _node(out, (a,), bw, "softmax")


def layer_norm(a, axis: int = -1, eps: float = 1e-6, gain: "Tensor | None" = None,
               bias: "Tensor | None" = None) -> Tensor:
    """Normalize to zero mean / unit variance along ``axis``.

    With ``gain``/``bias`` (1-D parameter tensors) the affine transform
    x_hat * (1 + gain) + bias is fused in; zero-initialized parameters are
    the identity scale.
    """
    a = _wrap(a)
    x = a.data
    if gain is not None and bias is not None and axis in (-1, a.ndim - 1):
        d = x.shape[-1]
        scale = 1.0 + gain.data
        out2, xhat2, inv2 = _kernels.ln_fwd(x.reshape(-1, d), scale, bias.data, eps)

        def bw_fused(g: Array) -> None:
            dx, dgain, dbias = _kernels.ln_bwd(g.reshape(-1, d), xhat2, inv2, scale)
            if gain.requires_grad:
                _accum(gain, dgain)
            if bias.requires_grad:
                _accum(bias, dbias)
            if a.requires_grad:
                _accum(a, dx.reshape(a.shape))

        return _node(out2.reshape(a.shape), (a, gain, bias), bw_fused, "layer_norm")

    mu = x.mean(axis=axis, keepdims=True)
    sq = np.einsum("...d,...d->...", x, x) / x.shape[axis]
    var = sq[..., None] - mu * mu
    inv = 1.0 / np.sqrt(np.maximum(var, 0.0) + eps)
    xhat = x - mu
    xhat *= inv
    if gain is None:  # plain normalization path
        out = xhat

        def bw(g: Array) -> None:
            gm = g.mean(axis=axis, keepdims=True)
            gy = (g * xhat).mean(axis=axis, keepdims=True)
            _accum(a, inv * (g - gm - xhat * gy))

        return _node(out, (a,), bw, "layer_norm")

    scale = 1.0 + gain.data
    out = xhat * scale
    if bias is not None:
        out += bias.data

    def bw_affine(g: Array) -> None:
        lead = tuple(range(g.ndim - 1))
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=lead))
        if gain.requires_grad:
            n_feat = g.shape[-1]
            _accum(gain, np.einsum("nd,nd->d", g.reshape(-1, n_feat),
                                   xhat.reshape(-1, n_feat)))
        if a.requires_grad:
            gp = g * scale
            gm = gp.mean(axis=axis, keepdims=True)
            n = x.shape[axis]
            gy = (np.einsum("...d,...d->...", gp, xhat) / n)[..., None]
            gp -= gm
            gp -= xhat * gy
            gp *= inv
            _accum(a, gp)

    parents = (a, gain) if bias is None else (a, gain, bias)
    return _node(out, parents, bw_affine, "layer_norm")


# -- shape ops ----------------------------------------------------------------

def residual_layer_norm(x, h, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Fused layer_norm(x + h) with affine parameters (last axis)."""
    x, h = _wrap(x), _wrap(h)
    if x.shape != h.shape:
        raise ShapeError(f"residual_layer_norm: shapes {x.shape} vs {h.shape}")
    d = x.shape[-1]
    scale = 1.0 + gain.data
    out2, xhat2, inv2 = _kernels.ln2_fwd(x.data.reshape(-1, d), h.data.reshape(-1, d),
                                         scale, bias.data, eps)

    def bw(g: Array) -> None:
        dx, dgain, dbias = _kernels.ln_bwd(g.reshape(-1, d), xhat2, inv2, scale)
        if gain.requires_grad:
            _accum(gain, dgain)
        if bias.requires_grad:
            _accum(bias, dbias)
        dx = dx.reshape(x.shape)
        _accum(x, dx)
        _accum(h, dx)

    return _node(out2.reshape(x.shape), (x, h, gain, bias), bw, "residual_layer_norm")


def linear_relu(x, w, b) -> Tensor:
    """Fused relu(x @ w + b)."""
    x, w = _wrap(x), _wrap(w)
    if x.shape[-1] != w.shape[-2]:
        raise ShapeError(f"linear_relu: input shape {x.shape} vs weight {w.shape}")
    out = x.data @ w.data
    if b is not None:
        out += b.data
    np.maximum(out, 0.0, out=out)

    def bw(g: Array) -> None:
        gz = g * (out > 0.0)
        if x.requires_grad:
            _accum(x, gz @ w.data.T)
        if w.requires_grad:
            flat = gz.reshape(-1, gz.shape[-1])
            _accum(w, x.data.reshape(-1, x.shape[-1]).T @ flat)
        if b is not None and b.requires_grad:
            _accum(b, gz.reshape(-1, gz.shape[-1]).sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, bw, "linear_relu")


def logit_bias(m, eps: float = 1e-12, clamp: float = 10.0) -> Tensor:
    """Fused log(m / (1 - m)) clamped to +/- ``clamp``."""
    m = _wrap(m)
    out = _kernels.logit_clip_fwd(m.data, eps, clamp)

    def bw(g: Array) -> None:
        _accum(m, _kernels.logit_clip_bwd(g, m.data, out, eps, clamp))

    return _node(out, (m,), bw, "logit_bias")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _wrap(a)
    out = a.data.reshape(shape)

    def bw(g: Array) -> None:
        _accum(a, g.reshape(a.shape))

    return _node(out, (a,), bw, "reshape")


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = _wrap(a)
    axes = tuple(axes)
    out = a.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def bw(g: Array) -> None:
        _accum(a, g.transpose(inv))

    return _node(out, (a,), bw, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g: Array) -> None:
        for t, piece in zip(ts, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _node(out, tuple(ts), bw, "concat")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice, type(None), type(Ellipsis)))
               for i in items)


def getitem(a, idx) -> Tensor:
    a = _wrap(a)
    out = a.data[idx]

    def bw(g: Array) -> None:
        if not a.requires_grad:
            return
        buf = np.zeros_like(a.data)
        if _is_basic_index(idx):
            buf[idx] += g   # basic slices never alias
        else:
            np.add.at(buf, idx, g)
        _accum(a, buf)

    return _node(out, (a,), bw, "getitem")


def permute_rows(a, perm: Array, inv_perm: Array, axis: int) -> Tensor:
    """Gather rows by a permutation; backward is the inverse gather
    (no scatter-add needed since every row appears exactly once)."""
    a = _wrap(a)
    out = np.take(a.data, perm, axis=axis)

    def bw(g: Array) -> None:
        _accum(a, np.take(g, inv_perm, axis=axis))

    return _node(out, (a,), bw, "permute_rows")


def take_rows(a, index: Array, axis: int) -> Tensor:
    """Gather along ``axis`` with an integer index vector (permutation-friendly)."""
    a = _wrap(a)
    index = np.asarray(index)
    out = np.take(a.data, index, axis=axis)

    def bw(g: Array) -> None:
        if not a.requires_grad:
            return
        buf = np.zeros_like(a.data)
        sl = [slice(None)] * a.ndim
        sl[axis] = index
        np.add.at(buf, tuple(sl), g)
        _accum(a, buf)

    return _node(out, (a,), bw, "take_rows")


def repeat2(a, axis: int) -> Tensor:
    """Repeat each entry twice along ``axis`` (nearest-neighbor upsample);
    backward sums adjacent pairs, no scatter needed."""
    a = _wrap(a)
    out = np.repeat(a.data, 2, axis=axis)

    def bw(g: Array) -> None:
        shp = list(g.shape)
        shp[axis] //= 2
        shp.insert(axis + 1, 2)
        _accum(a, g.reshape(shp).sum(axis=axis + 1))

    return _node(out, (a,), bw, "repeat2")


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    a = _wrap(a)
    shape = tuple(shape)
    out = np.broadcast_to(a.data, shape)

    def bw(g: Array) -> None:
        _accum(a, _unbroadcast(g, a.shape))

    return _node(out.copy(), (a,), bw, "broadcast")


# -- fused / structured ops ----------------------------------------------------

def bce_with_logits(logits, targets) -> Tensor:
    """Elementwise binary cross entropy from logits, numerically stable.

    bce = max(x, 0) - x*t + log(1 + exp(-|x|)); d/dx = sigmoid(x) - t.
    ``targets`` is a constant array (labels), not a tape node.
    """
    logits = _wrap(logits)
    t = np.asarray(targets, dtype=np.float64)
    x = logits.data
    out = _kernels.bce_logits_fwd(x, np.broadcast_to(t, x.shape))

    def bw(g: Array) -> None:
        _accum(logits, _kernels.bce_logits_bwd(g, x, np.broadcast_to(t, x.shape)))

    return _node(out, (logits,), bw, "bce_with_logits")


def bce_probs(probs, targets, eps: float = 1e-12) -> Tensor:
    """Elementwise BCE from probabilities (for sigmoid/convex-combined
    inputs whose logits are not available); ``targets`` is constant 0/1."""
    probs = _wrap(probs)
    t = np.asarray(targets, dtype=np.float64)
    p = probs.data
    tb = np.broadcast_to(t, p.shape)
    out = _kernels.bce_probs_fwd(p, tb, eps)

    def bw(g: Array) -> None:
        _accum(probs, _kernels.bce_probs_bwd(g, p, tb, eps))

    return _node(out, (probs,), bw, "bce_probs")


def sigmoid_with_max(logits, axis: int = -1) -> tuple[Tensor, Tensor]:
    """Fused sigmoid + exact max over the last axis (probs, joint)."""
    logits = _wrap(logits)
    if axis not in (-1, logits.ndim - 1):
        raise ContractError("sigmoid_with_max supports only the last axis")
    if not _kernels.HAVE_NUMBA:
        pt = sigmoid(logits)
        return pt, tmax(pt, axis=-1)
    d = logits.shape[-1]
    p2, mx, arg = _kernels._sigmoid_max_fwd(np.ascontiguousarray(logits.data).reshape(-1, d))
    probs_arr = p2.reshape(logits.shape)
    joint_arr = mx.reshape(logits.shape[:-1])

    def bw_probs(g: Array) -> None:
        _accum(logits, g * probs_arr * (1.0 - probs_arr))

    probs = _node(probs_arr, (logits,), bw_probs, "sigmoid")

    def bw_joint(g: Array) -> None:
        buf = np.zeros_like(probs_arr).reshape(-1, d)
        buf[np.arange(buf.shape[0]), arg] = g.reshape(-1)
        _accum(probs, buf.reshape(probs_arr.shape))

    joint = _node(joint_arr, (probs,), bw_joint, "max")
    return probs, joint


def bilinear_sample(grid, coords, fill: float = 0.0) -> Tensor:
    """Bilinear interpolation on a feature grid at continuous cell coords.

    grid: (H, W, D) or (B, H, W, D); coords: (..., 2) in cell units where
    integer coordinates are cell centers; batched grids expect coords with
    a matching leading batch axis (B, ..., 2). Samples outside the grid
    contribute ``fill`` (default 0), with zero gradient there.
    """
    grid = _wrap(grid)
    coords = _wrap(coords)
    batched = grid.ndim == 4
    gh, gw, gd = grid.shape[-3], grid.shape[-2], grid.shape[-1]
    c = coords.data
    x, y = c[..., 0], c[..., 1]
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx, fy = x - x0, y - y0
    x0i, y0i = x0.astype(np.int64), y0.astype(np.int64)

    def corner_ok(xi, yi):
        return (xi >= 0) & (xi < gh) & (yi >= 0) & (yi < gw)

    corners = []  # (xi, yi, weight, wgrad_x, wgrad_y, valid)
    for dx_, dy_ in ((0, 0), (1, 0), (0, 1), (1, 1)):
        xi, yi = x0i + dx_, y0i + dy_
        wx = fx if dx_ else (1.0 - fx)
        wy = fy if dy_ else (1.0 - fy)
        dwx = (1.0 if dx_ else -1.0)
        dwy = (1.0 if dy_ else -1.0)
        corners.append((xi, yi, wx * wy, dwx * wy, wx * dwy, corner_ok(xi, yi)))

    if batched:
        b = grid.shape[0]
        flat = grid.data.reshape(b, gh * gw, gd)
        bidx = np.arange(b).reshape((b,) + (1,) * (c.ndim - 2))
        bidx = np.broadcast_to(bidx, x.shape)
    else:
        flat = grid.data.reshape(gh * gw, gd)

    out = np.zeros(x.shape + (gd,))
    vals = []
    for xi, yi, w, _, _, ok in corners:
        lin = np.clip(xi, 0, gh - 1) * gw + np.clip(yi, 0, gw - 1)
        v = flat[bidx, lin] if batched else flat[lin]
        v = np.where(ok[..., None], v, fill)
        vals.append((v, lin, ok))
        out += w[..., None] * v

    def bw(g: Array) -> None:
        if grid.requires_grad:
            gbuf = np.zeros_like(flat)
            for (v, lin, ok), (_, _, w, _, _, _) in zip(vals, corners):
                contrib = np.where(ok[..., None], g * w[..., None], 0.0)
                if batched:
                    np.add.at(gbuf, (bidx, lin), contrib)
                else:
                    np.add.at(gbuf, lin, contrib)
            _accum(grid, gbuf.reshape(grid.shape))
        if coords.requires_grad:
            gx = np.zeros_like(x)
            gy = np.zeros_like(y)
            for (v, lin, ok), (_, _, _, dwx, dwy, _) in zip(vals, corners):
                dot = (g * v).sum(axis=-1)
                gx += dot * dwx
                gy += dot * dwy
            _accum(coords, np.stack([gx, gy], axis=-1))

    return _node(out, (grid, coords), bw, "bilinear_sample")


# -- tape walking ---------------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, seed: Array | float = 1.0, free_graph: bool = True) -> None:
    """Reverse-mode sweep from ``loss``; accumulates into ``.grad`` of leaves.

    ``seed`` defaults to 1 and must broadcast to the loss shape (scalar
    losses in training; vector seeds are used for Jacobian rows).
    When ``free_graph`` is set, interior nodes drop their closures and
    gradients as soon as they are consumed so memory is reclaimed during
    the sweep; the graph cannot be re-walked afterwards.
    """
    if not loss.requires_grad:
        raise ContractError("backward() called on a tensor with no tape")
    if not np.all(np.isfinite(loss.data)):
        raise NumericError(f"non-finite loss at op '{loss.op}'")
    order = _toposort(loss)
    loss.grad = np.broadcast_to(np.asarray(seed, dtype=np.float64), loss.shape).copy()
    for node in reversed(order):
        if node.grad is None or node._backward is None:
            continue
        node._backward(node.grad)
        if free_graph:
            node._backward = None
            node._parents = ()
            node.grad = None


def zero_grads(tensors: Sequence[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def fd_check(f: Callable[[Sequence[Tensor]], Tensor], xs: Sequence[Array], h: float = 1e-5,
             sample: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps a list of leaf Tensors to a scalar Tensor. All elements of
    every input are probed unless ``sample`` limits the per-input probe
    count (random without replacement, seeded by ``rng``).
    """
    leaves = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in xs]
    out = f(leaves)
    backward(out, free_graph=False)
    grads = [np.zeros_like(l.data) if l.grad is None else l.grad.copy() for l in leaves]

    worst = 0.0
    for li, leaf in enumerate(leaves):
        flat = leaf.data.reshape(-1)
        n = flat.size
        idxs = range(n)
        if sample is not None and sample < n:
            rng = rng or np.random.default_rng(0)
            idxs = rng.choice(n, size=sample, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            fp = f([Tensor(l.data) for l in leaves]).item()
            flat[i] = orig - h
            fm = f([Tensor(l.data) for l in leaves]).item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            ana = grads[li].reshape(-1)[i]
            denom = max(abs(num), abs(ana), 1e-8)
            worst = max(worst, abs(num - ana) / denom)
    return worst
