"""Masked attention kernels: numba fast path with a pure-numpy fallback.

The backend is chosen once at import from the RETRO_PAGER_BACKEND environment
variable ("numba" or "numpy"; default numba when importable) and can be
switched at runtime with set_backend().  Both paths compute the same masked
softmax attention; the numba kernels skip disallowed columns instead of
materializing dense score matrices, which is where the win comes from on the
block-sparse masks produced by page retrieval.

Inputs are head-major: q [H, Tq, hd], k/v [H, Tk, hd], mask [Tq, Tk] bool
shared across heads.  Every query row must have at least one allowed column;
callers enforce that (self-attention always permits the diagonal).
"""

from __future__ import annotations

import os

import numpy as np

try:
    import warnings

    from numba import njit, prange
    from numba.core.errors import NumbaWarning

    # stale-TBB detection downgrades the threading layer with a warning;
    # harmless here, so keep stderr clean
    warnings.filterwarnings("ignore", category=NumbaWarning, message=".*TBB.*")
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    HAS_NUMBA = False
    prange = range

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn
        return wrap


def _resolve(name: str | None) -> str:
    if name is None:
        name = os.environ.get("RETRO_PAGER_BACKEND", "numba" if HAS_NUMBA else "numpy")
    name = name.lower()
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not HAS_NUMBA:
        name = "numpy"
    return name


_BACKEND = _resolve(None)


def backend_name() -> str:
    return _BACKEND


def set_backend(name: str) -> str:
    """Switch kernel backend; returns the backend actually selected."""
    global _BACKEND
    _BACKEND = _resolve(name)
    return _BACKEND


# ---- pure numpy ------------------------------------------------------------

def _fwd_numpy(q, k, v, mask, scale):
    scores = (q @ k.transpose(0, 2, 1)) * scale          # [H, Tq, Tk]
    scores = np.where(mask[None, :, :], scores, -np.inf)
    m = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - m)
    probs = e / e.sum(axis=-1, keepdims=True)
    ctx = probs @ v
    return ctx, probs


def _bwd_numpy(q, k, v, probs, mask, dctx, scale):
    dp = dctx @ v.transpose(0, 2, 1)                     # [H, Tq, Tk]
    rowdot = (probs * dp).sum(axis=-1, keepdims=True)
    ds = probs * (dp - rowdot) * scale
    dq = ds @ k
    dk = ds.transpose(0, 2, 1) @ q
    dv = probs.transpose(0, 2, 1) @ dctx
    return dq, dk, dv


# ---- numba -----------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True, parallel=True)
    def _fwd_numba(q, k, v, mask, scale, probs, ctx):
        H, Tq, D = q.shape
        Tk = k.shape[1]
        for i in prange(Tq):
            for h in range(H):
                mx = -np.inf
                for j in range(Tk):
                    if mask[i, j]:
                        s = 0.0
                        for d in range(D):
                            s += q[h, i, d] * k[h, j, d]
                        s *= scale
                        probs[h, i, j] = s
                        if s > mx:
                            mx = s
                total = 0.0
                for j in range(Tk):
                    if mask[i, j]:
                        e = np.exp(probs[h, i, j] - mx)
                        probs[h, i, j] = e
                        total += e
                inv = 1.0 / total
                for j in range(Tk):
                    if mask[i, j]:
                        p = probs[h, i, j] * inv
                        probs[h, i, j] = p
                        for d in range(D):
                            ctx[h, i, d] += p * v[h, j, d]

    @njit(cache=True, parallel=True)
    def _bwd_numba(q, k, v, probs, mask, dctx, scale, dq, dk, dv):
        H, Tq, D = q.shape
        Tk = k.shape[1]
        # parallel over heads only: dk/dv rows accumulate across query rows
        for h in prange(H):
            dp = np.empty(Tk, np.float64)
            for i in range(Tq):
                rowdot = 0.0
                for j in range(Tk):
                    if mask[i, j]:
                        acc = 0.0
                        for d in range(D):
                            acc += dctx[h, i, d] * v[h, j, d]
                        dp[j] = acc
                        rowdot += probs[h, i, j] * acc
                for j in range(Tk):
                    if mask[i, j]:
                        p = probs[h, i, j]
                        ds = p * (dp[j] - rowdot) * scale
                        for d in range(D):
                            dq[h, i, d] += ds * k[h, j, d]
                            dk[h, j, d] += ds * q[h, i, d]
                            dv[h, j, d] += p * dctx[h, i, d]


# ---- public API ------------------------------------------------------------

def masked_attention(q, k, v, mask, scale: float, want_probs: bool = False):
    """Masked softmax attention.  Returns (ctx, probs or None)."""
    scale = float(scale)  # a numpy double scalar would upcast float32 inputs
    if _BACKEND == "numpy":
        ctx, probs = _fwd_numpy(q, k, v, mask, scale)
        return ctx, (probs if want_probs else None)
    q = np.ascontiguousarray(q)
    k = np.ascontiguousarray(k)
    v = np.ascontiguousarray(v)
    mask = np.ascontiguousarray(mask)
    probs = np.zeros((q.shape[0], q.shape[1], k.shape[1]), dtype=q.dtype)
    ctx = np.zeros_like(q)
    _fwd_numba(q, k, v, mask, float(scale), probs, ctx)
    return ctx, (probs if want_probs else None)


def masked_attention_backward(q, k, v, probs, mask, dctx, scale: float):
    """Gradient of masked_attention wrt q, k, v given cached probs."""
    scale = float(scale)
    if _BACKEND == "numpy":
        return _bwd_numpy(q, k, v, probs, mask, dctx, scale)
    q = np.ascontiguousarray(q)
    k = np.ascontiguousarray(k)
    v = np.ascontiguousarray(v)
    probs = np.ascontiguousarray(probs)
    mask = np.ascontiguousarray(mask)
    dctx = np.ascontiguousarray(dctx)
    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    _bwd_numba(q, k, v, probs, mask, dctx, float(scale), dq, dk, dv)
    return dq, dk, dv


def set_num_threads(n: int) -> None:
    if HAS_NUMBA and n >= 1:
        import numba
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
