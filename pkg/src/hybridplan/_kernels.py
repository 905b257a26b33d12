"""Fused numeric kernels for the hot elementwise paths.

numba-compiled when available (strict IEEE, no fastmath, so results stay
deterministic and bit-stable); plain numpy fallbacks otherwise. All
kernels operate on 2-D row-major views (rows x features).
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except Exception:  # pragma: no cover - numba is expected in this environment
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        if args and callable(args[0]):
            return args[0]
        return wrap


@njit(cache=True)
def _ln_fwd(x, scale, bias, eps):  # pragma: no cover - jitted
    n, d = x.shape
    out = np.empty_like(x)
    xhat = np.empty_like(x)
    inv = np.empty(n)
    for i in range(n):
        s = 0.0
        ss = 0.0
        for j in range(d):
            v = x[i, j]
            s += v
            ss += v * v
        mu = s / d
        var = ss / d - mu * mu
        if var < 0.0:
            var = 0.0
        w = 1.0 / np.sqrt(var + eps)
        inv[i] = w
        for j in range(d):
            h = (x[i, j] - mu) * w
            xhat[i, j] = h
            out[i, j] = h * scale[j] + bias[j]
    return out, xhat, inv


@njit(cache=True)
def _ln2_fwd(x, h, scale, bias, eps):  # pragma: no cover - jitted
    """layer_norm(x + h) with the residual sum fused into the row pass."""
    n, d = x.shape
    out = np.empty_like(x)
    xhat = np.empty_like(x)
    inv = np.empty(n)
    for i in range(n):
        s = 0.0
        ss = 0.0
        for j in range(d):
            v = x[i, j] + h[i, j]
            out[i, j] = v  # stash the sum
            s += v
            ss += v * v
        mu = s / d
        var = ss / d - mu * mu
        if var < 0.0:
            var = 0.0
        w = 1.0 / np.sqrt(var + eps)
        inv[i] = w
        for j in range(d):
            hh = (out[i, j] - mu) * w
            xhat[i, j] = hh
            out[i, j] = hh * scale[j] + bias[j]
    return out, xhat, inv


@njit(cache=True)
def _logit_clip_fwd(m, eps, c):  # pragma: no cover - jitted
    out = np.empty_like(m)
    for i in range(m.size):
        v = m.flat[i]
        y = np.log(v + eps) - np.log(1.0 - v + eps)
        if y > c:
            y = c
        elif y < -c:
            y = -c
        out.flat[i] = y
    return out


@njit(cache=True)
def _logit_clip_bwd(g, m, out, eps, c):  # pragma: no cover - jitted
    dx = np.empty_like(m)
    for i in range(m.size):
        y = out.flat[i]
        if -c < y < c:
            v = m.flat[i]
            dx.flat[i] = g.flat[i] * (1.0 / (v + eps) + 1.0 / (1.0 - v + eps))
        else:
            dx.flat[i] = 0.0
    return dx


@njit(cache=True)
def _ln_bwd(g, xhat, inv, scale):  # pragma: no cover - jitted
    n, d = g.shape
    dx = np.empty_like(g)
    dgain = np.zeros(d)
    dbias = np.zeros(d)
    for i in range(n):
        gm = 0.0
        gy = 0.0
        for j in range(d):
            gj = g[i, j]
            h = xhat[i, j]
            dgain[j] += gj * h
            dbias[j] += gj
            gp = gj * scale[j]
            gm += gp
            gy += gp * h
        gm /= d
        gy /= d
        w = inv[i]
        for j in range(d):
            gp = g[i, j] * scale[j]
            dx[i, j] = (gp - gm - xhat[i, j] * gy) * w
    return dx, dgain, dbias


@njit(cache=True)
def _softmax_fwd(x):  # pragma: no cover - jitted
    n, d = x.shape
    out = np.empty_like(x)
    for i in range(n):
        m = x[i, 0]
        for j in range(1, d):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(d):
            e = np.exp(x[i, j] - m)
            out[i, j] = e
            s += e
        for j in range(d):
            out[i, j] /= s
    return out


@njit(cache=True)
def _softmax_bwd(g, y):  # pragma: no cover - jitted
    n, d = g.shape
    dx = np.empty_like(g)
    for i in range(n):
        dot = 0.0
        for j in range(d):
            dot += g[i, j] * y[i, j]
        for j in range(d):
            dx[i, j] = y[i, j] * (g[i, j] - dot)
    return dx


def ln2_fwd(x2d, h2d, scale, bias, eps):
    if HAVE_NUMBA:
        return _ln2_fwd(np.ascontiguousarray(x2d), np.ascontiguousarray(h2d), scale, bias, eps)
    return ln_fwd(x2d + h2d, scale, bias, eps)


def logit_clip_fwd(m, eps, c):
    if HAVE_NUMBA:
        return _logit_clip_fwd(np.ascontiguousarray(m), eps, c)
    return np.clip(np.log(m + eps) - np.log1p(eps - m), -c, c)


def logit_clip_bwd(g, m, out, eps, c):
    if HAVE_NUMBA:
        return _logit_clip_bwd(np.ascontiguousarray(g), np.ascontiguousarray(m),
                               np.ascontiguousarray(out), eps, c)
    inside = (out > -c) & (out < c)
    return g * inside * (1.0 / (m + eps) + 1.0 / (1.0 - m + eps))


def ln_fwd(x2d: np.ndarray, scale: np.ndarray, bias: np.ndarray, eps: float):
    if HAVE_NUMBA:
        return _ln_fwd(np.ascontiguousarray(x2d), scale, bias, eps)
    mu = x2d.mean(axis=-1, keepdims=True)
    var = np.maximum((x2d * x2d).mean(axis=-1, keepdims=True) - mu * mu, 0.0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x2d - mu) * inv
    return xhat * scale + bias, xhat, inv[:, 0]


def ln_bwd(g2d: np.ndarray, xhat: np.ndarray, inv: np.ndarray, scale: np.ndarray):
    if HAVE_NUMBA:
        return _ln_bwd(np.ascontiguousarray(g2d), xhat, inv, scale)
    d = g2d.shape[-1]
    dgain = np.einsum("nd,nd->d", g2d, xhat)
    dbias = g2d.sum(axis=0)
    gp = g2d * scale
    gm = gp.mean(axis=-1, keepdims=True)
    gy = (np.einsum("nd,nd->n", gp, xhat) / d)[:, None]
    dx = (gp - gm - xhat * gy) * inv[:, None]
    return dx, dgain, dbias


def softmax_fwd(x2d: np.ndarray) -> np.ndarray:
    if HAVE_NUMBA:
        return _softmax_fwd(np.ascontiguousarray(x2d))
    shifted = x2d - x2d.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_bwd(g2d: np.ndarray, y2d: np.ndarray) -> np.ndarray:
    if HAVE_NUMBA:
        return _softmax_bwd(np.ascontiguousarray(g2d), np.ascontiguousarray(y2d))
    dot = (g2d * y2d).sum(axis=-1, keepdims=True)
    return y2d * (g2d - dot)


@njit(cache=True)
def _bce_logits_fwd(x, t):  # pragma: no cover - jitted
    out = np.empty_like(x)
    for i in range(x.size):
        v = x.flat[i]
        tv = t.flat[i]
        if v >= 0.0:
            out.flat[i] = v - v * tv + np.log1p(np.exp(-v))
        else:
            out.flat[i] = -v * tv + np.log1p(np.exp(v))
    return out


@njit(cache=True)
def _bce_logits_bwd(g, x, t):  # pragma: no cover - jitted
    out = np.empty_like(x)
    for i in range(x.size):
        v = x.flat[i]
        s = 0.5 * (np.tanh(0.5 * v) + 1.0)
        out.flat[i] = g.flat[i] * (s - t.flat[i])
    return out


@njit(cache=True)
def _bce_probs_fwd(p, t, eps):  # pragma: no cover - jitted
    out = np.empty_like(p)
    for i in range(p.size):
        pv = p.flat[i]
        tv = t.flat[i]
        out.flat[i] = -(tv * np.log(pv + eps) + (1.0 - tv) * np.log(1.0 - pv + eps))
    return out


@njit(cache=True)
def _bce_probs_bwd(g, p, t, eps):  # pragma: no cover - jitted
    out = np.empty_like(p)
    for i in range(p.size):
        pv = p.flat[i]
        tv = t.flat[i]
        out.flat[i] = g.flat[i] * ((1.0 - tv) / (1.0 - pv + eps) - tv / (pv + eps))
    return out


@njit(cache=True)
def _sigmoid_max_fwd(x2d):  # pragma: no cover - jitted
    """Row-wise sigmoid plus max-over-row of the result, with argmax."""
    n, d = x2d.shape
    probs = np.empty_like(x2d)
    mx = np.empty(n)
    arg = np.empty(n, dtype=np.int64)
    for i in range(n):
        best = -1.0
        bj = 0
        for j in range(d):
            s = 0.5 * (np.tanh(0.5 * x2d[i, j]) + 1.0)
            probs[i, j] = s
            if s > best:
                best = s
                bj = j
        mx[i] = best
        arg[i] = bj
    return probs, mx, arg


def bce_logits_fwd(x, t):
    if HAVE_NUMBA:
        return _bce_logits_fwd(np.ascontiguousarray(x), np.ascontiguousarray(t))
    return np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))


def bce_logits_bwd(g, x, t):
    if HAVE_NUMBA:
        return _bce_logits_bwd(np.ascontiguousarray(g), np.ascontiguousarray(x),
                               np.ascontiguousarray(t))
    s = 0.5 * (np.tanh(x * 0.5) + 1.0)
    return g * (s - t)


def bce_probs_fwd(p, t, eps):
    if HAVE_NUMBA:
        return _bce_probs_fwd(np.ascontiguousarray(p), np.ascontiguousarray(t), eps)
    return -(t * np.log(p + eps) + (1.0 - t) * np.log1p(eps - p))


def bce_probs_bwd(g, p, t, eps):
    if HAVE_NUMBA:
        return _bce_probs_bwd(np.ascontiguousarray(g), np.ascontiguousarray(p),
                              np.ascontiguousarray(t), eps)
    return g * ((1.0 - t) / (1.0 - p + eps) - t / (p + eps))


def warmup() -> None:
    """Trigger JIT compilation once (cached across processes)."""
    if not HAVE_NUMBA:
        return
    x = np.random.default_rng(0).standard_normal((4, 8))
    s, b = np.ones(8), np.zeros(8)
    out, xhat, inv = ln_fwd(x, s, b, 1e-6)
    ln_bwd(out, xhat, inv, s)
    softmax_bwd(softmax_fwd(x), x)
    t = (x > 0).astype(np.float64)
    bce_logits_bwd(bce_logits_fwd(x, t), x, t)
    p = softmax_fwd(x)
    bce_probs_bwd(bce_probs_fwd(p, t, 1e-12), p, t, 1e-12)
    _sigmoid_max_fwd(x)
    ln2_fwd(x, x, s, b, 1e-6)
    logit_clip_bwd(p, p, logit_clip_fwd(p, 1e-12, 10.0), 1e-12, 10.0)
