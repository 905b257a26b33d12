"""Network building blocks on top of the autodiff tape.

Parameters live in a ParamStore (flat name -> Tensor map) so checkpoints
are named blocks; modules are thin wrappers that register their tensors
at construction time in a deterministic order.
"""

from __future__ import annotations

import math
import struct
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, ContractError, DataError, ShapeError

Array = np.ndarray

NEG_INF = float("-inf")


class ParamStore:
    """Flat registry of named parameters with a seeded initializer RNG."""

    def __init__(self, seed: int = 0):
        self.params: dict[str, Tensor] = {}
        self.rng = np.random.default_rng(seed)

    def param(self, name: str, shape: tuple[int, ...], init: str = "xavier") -> Tensor:
        if name in self.params:
            raise ConfigurationError(f"duplicate parameter name: {name}")
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "xavier":
            fan_in = shape[0] if len(shape) > 1 else shape[0]
            fan_out = shape[-1]
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            data = self.rng.uniform(-bound, bound, size=shape)
        elif init == "normal":
            data = self.rng.standard_normal(shape) * 0.02
        else:
            raise ConfigurationError(f"unknown init: {init}")
        t = Tensor(data, requires_grad=True)
        self.params[name] = t
        return t

    def tensors(self) -> list[Tensor]:
        return list(self.params.values())

    def named(self) -> dict[str, Tensor]:
        return dict(self.params)

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state_dict(self) -> dict[str, Array]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, Array]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise DataError(f"parameter name mismatch; missing={sorted(missing)[:4]} extra={sorted(extra)[:4]}")
        for k, v in state.items():
            if self.params[k].shape != v.shape:
                raise DataError(f"checkpoint/config dim mismatch for '{k}': {v.shape} vs {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)


class Linear:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int,
                 bias: bool = True, init: str = "xavier"):
        self.w = store.param(f"{name}.w", (d_in, d_out), init)
        self.b = store.param(f"{name}.b", (d_out,), "zeros") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.w, self.b)


class MLP:
    """ReLU MLP; ``dims`` includes input and output widths."""

    def __init__(self, store: ParamStore, name: str, dims: Sequence[int]):
        self.layers = [Linear(store, f"{name}.{i}", dims[i], dims[i + 1])
                       for i in range(len(dims) - 1)]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.relu(x)
        return x


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, dim: int):
        # gain parameterized as (1 + g) so zero-init is the identity scale
        self.g = store.param(f"{name}.g", (dim,), "zeros")
        self.b = store.param(f"{name}.b", (dim,), "zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, gain=self.g, bias=self.b)


class FFN:
    """Residual feed-forward block: layer_norm(x + W2 relu(W1 x))."""

    def __init__(self, store: ParamStore, name: str, dim: int, hidden: int | None = None,
                 dropout: float = 0.0):
        hidden = hidden or dim
        self.lin1 = Linear(store, f"{name}.lin1", dim, hidden)
        self.lin2 = Linear(store, f"{name}.lin2", hidden, dim)
        self.norm = LayerNorm(store, f"{name}.norm", dim)
        self.dropout = dropout

    def __call__(self, x: Tensor, ctx: "RunContext | None" = None) -> Tensor:
        h = self.lin2(ad.linear_relu(x, self.lin1.w, self.lin1.b))
        h = apply_dropout(h, self.dropout, ctx)
        return ad.residual_layer_norm(x, h, self.norm.g, self.norm.b)


class RunContext:
    """Per-forward execution state: dropout rng + train/eval flag."""

    def __init__(self, training: bool = False, seed: int = 0):
        self.training = training
        # SFC64: fastest counter-based generator in numpy; seeded, reproducible
        self.rng = np.random.Generator(np.random.SFC64(seed))


def apply_dropout(x: Tensor, rate: float, ctx: RunContext | None) -> Tensor:
    if ctx is None or not ctx.training or rate <= 0.0:
        return x
    keep = 1.0 - rate
    thresh = int(keep * (1 << 32))
    bits = ctx.rng.integers(0, 1 << 32, size=x.shape, dtype=np.uint32)
    mask = (bits < thresh) * (1.0 / keep)
    return x * Tensor(mask)


def sinusoidal_pe(coords, dim: int) -> Tensor:
    """Sinusoidal positional encoding of 2-D coordinates.

    coords: (..., 2) in meters (or any consistent unit). Output (..., dim)
    with dim divisible by 4: per frequency f_i the four channels are
    (sin x f_i, cos x f_i, sin y f_i, cos y f_i), geometric frequency ladder
    from 1 rad/unit down by 1000x.
    """
    if dim % 4 != 0:
        raise ConfigurationError(f"PE dim must be divisible by 4, got {dim}")
    coords = coords if isinstance(coords, Tensor) else Tensor(coords)
    n_freq = dim // 4
    freqs = np.power(1000.0, -np.arange(n_freq) / max(n_freq - 1, 1))
    x = coords[..., 0:1]
    y = coords[..., 1:2]
    xs = x * Tensor(freqs)  # (..., n_freq)
    ys = y * Tensor(freqs)
    parts = ad.concat(
        [_sin(xs).reshape(xs.shape + (1,)), _cos(xs).reshape(xs.shape + (1,)),
         _sin(ys).reshape(ys.shape + (1,)), _cos(ys).reshape(ys.shape + (1,))],
        axis=-1,
    )
    return parts.reshape(coords.shape[:-1] + (dim,))


def _sin(t: Tensor) -> Tensor:
    out = np.sin(t.data)

    def bw(g):
        ad._accum(t, g * np.cos(t.data))

    return ad._node(out, (t,), bw, "sin")


def _cos(t: Tensor) -> Tensor:
    out = np.cos(t.data)

    def bw(g):
        ad._accum(t, g * -np.sin(t.data))

    return ad._node(out, (t,), bw, "cos")


def _check_mask(bias: Array, n_k: int) -> None:
    if np.isnan(bias).any():
        raise ContractError("attention mask contains NaN")
    finite_any = np.isfinite(bias).any(axis=-1)
    if not finite_any.all():
        raise ContractError("attention mask leaves a query row with no finite key")


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask=None, heads: int = 1) -> Tensor:
    """Multi-head scaled dot-product attention without projections.

    q: (..., n_q, D); k, v: (..., n_k, D); mask: additive bias broadcastable
    to (..., heads, n_q, n_k) — entries 0/-inf or a real-valued soft bias.
    Splits D across heads, softmaxes per row, returns (..., n_q, D).
    """
    d = q.shape[-1]
    if d % heads != 0:
        raise ConfigurationError(f"head count {heads} does not divide feature dim {d}")
    if k.shape[-1] != d or v.shape[-1] != d:
        raise ShapeError(f"attention: q dim {q.shape} vs k {k.shape} / v {v.shape}")
    dh = d // heads
    n_q, n_k = q.shape[-2], k.shape[-2]
    batch = q.shape[:-2]

    def split(t: Tensor, n: int) -> Tensor:
        t = t.reshape(batch + (n, heads, dh))
        order = tuple(range(len(batch))) + (len(batch) + 1, len(batch), len(batch) + 2)
        return t.transpose(order)  # (..., heads, n, dh)

    qh, kh, vh = split(q, n_q), split(k, n_k), split(v, n_k)
    scores = qh @ kh.transpose(tuple(range(qh.ndim - 2)) + (qh.ndim - 1, qh.ndim - 2))
    scores = scores * (1.0 / math.sqrt(dh))
    if mask is not None:
        bias = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
        _check_mask(np.broadcast_to(bias, scores.shape), n_k)
        scores = scores + (mask if isinstance(mask, Tensor) else Tensor(bias))
    weights = ad.softmax(scores, axis=-1)
    out = weights @ vh  # (..., heads, n_q, dh)
    order = tuple(range(len(batch))) + (len(batch) + 1, len(batch), len(batch) + 2)
    out = out.transpose(order)  # (..., n_q, heads, dh)
    return out.reshape(batch + (n_q, d))


class MultiHeadAttention:
    """Projected multi-head attention with residual + layer norm.

    When there are far fewer keys than queries the projections are folded
    onto the key/value side (per head, scores = q @ (Wq_h @ k_h^T) and the
    output projection is applied to the values before mixing) — the same
    function by associativity, at a fraction of the grid-row GEMM cost.
    """

    def __init__(self, store: ParamStore, name: str, dim: int, heads: int, dropout: float = 0.0):
        self.wq = Linear(store, f"{name}.wq", dim, dim)
        self.wk = Linear(store, f"{name}.wk", dim, dim)
        self.wv = Linear(store, f"{name}.wv", dim, dim)
        self.wo = Linear(store, f"{name}.wo", dim, dim)
        self.norm = LayerNorm(store, f"{name}.norm", dim)
        self.dim = dim
        self.heads = heads
        self.dropout = dropout

    def _attend_folded(self, q: Tensor, k: Tensor, v: Tensor, mask) -> Tensor:
        d, h = self.dim, self.heads
        dh = d // h
        lead = q.shape[:-2]
        n_q, n_k = q.shape[-2], k.shape[-2]
        ax = tuple(range(len(lead)))
        khat = self.wk(k).reshape(lead + (n_k, h, dh))
        vhat = self.wv(v).reshape(lead + (n_k, h, dh))
        khat_t = khat.transpose(ax + (len(lead) + 1, len(lead) + 2, len(lead)))  # (..., h, dh, n_k)
        # per-head fold A_h = Wq_h @ khat_h^T, merged to (..., D, h*n_k) so the
        # score GEMM (and its backward) stay single dense matmuls
        wq_heads = self.wq.w.reshape((d, h, dh)).transpose((1, 0, 2))  # (h, D, dh)
        a_all = wq_heads @ khat_t                              # (..., h, D, n_k)
        a_merged = a_all.transpose(ax + (len(lead) + 1, len(lead), len(lead) + 2))
        a_merged = a_merged.reshape(lead + (d, h * n_k))
        scores = (q @ a_merged) * (1.0 / math.sqrt(dh))        # (..., n_q, h*n_k)
        scores = scores.reshape(lead + (n_q, h, n_k))
        if self.wq.b is not None:
            bias_scores = self.wq.b.reshape((h, 1, dh)) @ khat_t   # (..., h, 1, n_k)
            bias_scores = bias_scores.transpose(ax + (len(lead) + 1, len(lead), len(lead) + 2))
            scores = scores + bias_scores * (1.0 / math.sqrt(dh))
        if mask is not None:
            bias = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
            # layout here is (..., n_q, heads, n_k): move the head axis over
            if bias.ndim >= 3:
                mask_t = (mask if isinstance(mask, Tensor) else Tensor(bias))
                perm = tuple(range(bias.ndim - 3)) + (bias.ndim - 2, bias.ndim - 3, bias.ndim - 1)
                mask_t = mask_t.transpose(perm)
            else:
                mask_t = Tensor(bias[:, None, :]) if not isinstance(mask, Tensor) \
                    else mask.reshape((n_q, 1, n_k))
            _check_mask(np.broadcast_to(mask_t.data, scores.shape), n_k)
            scores = scores + mask_t
        weights = ad.softmax(scores, axis=-1)                  # rows are (query, head)
        # fold the output projection onto the values: V2_h = vhat_h @ Wo_h
        wo_heads = self.wo.w.reshape((h, dh, d))
        vhat_t = vhat.transpose(ax + (len(lead) + 1, len(lead), len(lead) + 2))
        v2 = (vhat_t @ wo_heads).reshape(lead + (h * n_k, d))  # (..., h*n_k, D)
        out = weights.reshape(lead + (n_q, h * n_k)) @ v2
        return out + self.wo.b if self.wo.b is not None else out

    def attend(self, q: Tensor, k: Tensor, v: Tensor, mask=None) -> Tensor:
        """Projection + attention + output projection, no residual."""
        n_q, n_k = q.shape[-2], k.shape[-2]
        if n_k * 8 <= n_q:
            return self._attend_folded(q, k, v, mask)
        out = scaled_dot_attention(self.wq(q), self.wk(k), self.wv(v), mask, self.heads)
        return self.wo(out)

    def __call__(self, q: Tensor, k: Tensor, v: Tensor, mask=None,
                 ctx: RunContext | None = None) -> Tensor:
        h = self.attend(q, k, v, mask)
        h = apply_dropout(h, self.dropout, ctx)
        return ad.residual_layer_norm(q, h, self.norm.g, self.norm.b)


# -- shifted-window cross attention ------------------------------------------

_PERM_CACHE: dict[tuple[int, int, int, int], tuple[Array, Array, int]] = {}


def window_permutation(h: int, w: int, window: int, shift: int) -> tuple[Array, Array, int]:
    """Flat index permutation realizing roll(-shift) + window partition.

    Returns (perm, inv_perm, n_windows): applying ``perm`` to a flattened
    (h*w) grid orders cells window-by-window after the cyclic roll;
    ``inv_perm`` undoes it.
    """
    key = (h, w, window, shift)
    if key in _PERM_CACHE:
        return _PERM_CACHE[key]
    rows = (np.arange(h) + shift) % h
    cols = (np.arange(w) + shift) % w
    lin = (rows[:, None] * w + cols[None, :])  # rolled source index per target cell
    nh, nw = h // window, w // window
    lin = lin.reshape(nh, window, nw, window).transpose(0, 2, 1, 3).reshape(-1)
    inv = np.empty_like(lin)
    inv[lin] = np.arange(lin.size)
    _PERM_CACHE[key] = (lin, inv, nh * nw)
    return _PERM_CACHE[key]


def sw_mca(q_grid: Tensor, kv: Tensor, window: int, shift: int, mask=None, *,
           attn: MultiHeadAttention, ctx: RunContext | None = None) -> Tensor:
    """Shifted-window multi-head cross attention over a feature grid.

    q_grid: (H, W, D) or (B, H, W, D); kv: matching (n_k, D) / (B, n_k, D).
    The grid is cyclically rolled by ``shift``, partitioned into
    window x window blocks whose queries jointly attend to kv, then rolled
    back. ``mask`` is a per-cell additive bias over keys with shape
    (..., H, W, n_k); it rolls along with the queries. With a single
    window and zero shift this reduces to dense attention on the
    flattened grid, taking that exact code path.
    """
    if window <= 0:
        raise ConfigurationError(f"window must be positive, got {window}")
    batched = q_grid.ndim == 4
    h, w, d = q_grid.shape[-3], q_grid.shape[-2], q_grid.shape[-1]
    lead = q_grid.shape[:-3]
    if h % window or w % window:
        raise ConfigurationError(f"window {window} must divide grid extents ({h}, {w})")
    if shift >= window:
        raise ConfigurationError(f"shift {shift} must be smaller than window {window}")

    flat_q = q_grid.reshape(lead + (h * w, d))
    flat_mask = None
    if mask is not None:
        mt = mask if isinstance(mask, Tensor) else Tensor(np.asarray(mask, dtype=np.float64))
        flat_mask = mt.reshape(mt.shape[:-3] + (h * w, mt.shape[-1]))

    if window >= max(h, w) and shift == 0:
        dense_mask = None
        if flat_mask is not None:
            # insert head axis for broadcasting
            dense_mask = flat_mask.reshape(flat_mask.shape[:-2] + (1,) + flat_mask.shape[-2:])
        out = attn(flat_q, kv, kv, dense_mask, ctx=ctx)
        return out.reshape(lead + (h, w, d))

    # kv is shared by every window, so the per-window joint attentions can be
    # batched as one call over the roll+window row ordering; the permutation
    # realizes the shifted-window mechanism and is undone afterwards.
    perm, inv, _ = window_permutation(h, w, window, shift)
    win_q = ad.permute_rows(flat_q, perm, inv, axis=len(lead))
    win_mask = None
    if flat_mask is not None:
        pm = ad.permute_rows(flat_mask, perm, inv, axis=flat_mask.ndim - 2)
        win_mask = pm.reshape(pm.shape[:-2] + (1,) + pm.shape[-2:])
    out = attn(win_q, kv, kv, win_mask, ctx=ctx)
    out = ad.permute_rows(out, inv, perm, axis=len(lead))
    return out.reshape(lead + (h, w, d))


def deformable_sample(grid: Tensor, ref, offsets, world_to_cell, fill: float = 0.0) -> Tensor:
    """Average of bilinear samples at ``ref + offsets`` (world meters).

    grid: (H, W, D) or (B, H, W, D); ref: (..., 2); offsets: (..., N_p, 2).
    ``world_to_cell`` maps world coordinates to continuous cell coords
    (integer = cell center); out-of-bounds samples contribute zeros.
    """
    ref = ref if isinstance(ref, Tensor) else Tensor(ref)
    offsets = offsets if isinstance(offsets, Tensor) else Tensor(offsets)
    pts = ref.reshape(ref.shape[:-1] + (1, 2)) + offsets  # (..., N_p, 2)
    cells = world_to_cell(pts)
    sampled = ad.bilinear_sample(grid, cells, fill=fill)  # (..., N_p, D)
    return sampled.mean(axis=-2)


# -- optimizer -----------------------------------------------------------------

class MomentOptimizer:
    """Adam-style moments with decoupled weight decay and cosine schedule."""

    def __init__(self, params: Sequence[Tensor], lr: float, weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 total_steps: int | None = None):
        if lr <= 0:
            raise ConfigurationError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.total_steps = total_steps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def current_lr(self) -> float:
        if not self.total_steps:
            return self.lr
        frac = min(self.t / self.total_steps, 1.0)
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * frac))

    def step(self) -> float:
        """Apply one update from accumulated grads; returns the lr used."""
        self.t += 1
        lr_t = self.current_lr()
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= lr_t * update
        return lr_t


# -- checkpoint io --------------------------------------------------------------

_CKPT_MAGIC = b"HPPC\x01"


def save_checkpoint(path: str, store: ParamStore, meta: dict[str, str] | None = None) -> None:
    """Named parameter blocks, little-endian float64 with shape headers."""
    meta = meta or {}
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", len(meta)))
        for k, v in sorted(meta.items()):
            kb, vb = k.encode(), str(v).encode()
            f.write(struct.pack("<II", len(kb), len(vb)))
            f.write(kb)
            f.write(vb)
        items = store.named()
        f.write(struct.pack("<I", len(items)))
        for name, t in items.items():
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", t.ndim))
            f.write(struct.pack(f"<{t.ndim}q", *t.shape))
            f.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> tuple[dict[str, Array], dict[str, str]]:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    if not raw.startswith(_CKPT_MAGIC):
        raise DataError(f"not a checkpoint file: {path}")
    off = len(_CKPT_MAGIC)

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(raw):
            raise DataError(f"truncated checkpoint file: {path}")
        out = raw[off:off + n]
        off += n
        return out

    meta: dict[str, str] = {}
    (n_meta,) = struct.unpack("<I", take(4))
    for _ in range(n_meta):
        lk, lv = struct.unpack("<II", take(8))
        key = take(lk).decode()
        meta[key] = take(lv).decode()
    (n_items,) = struct.unpack("<I", take(4))
    state: dict[str, Array] = {}
    for _ in range(n_items):
        (ln,) = struct.unpack("<I", take(4))
        name = take(ln).decode()
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}q", take(8 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).copy()
        state[name] = data
    return state, meta
