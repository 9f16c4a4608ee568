"""Hot row-wise kernels with numba acceleration and a pure-numpy fallback.

The layer-norm and softmax kernels dominate the non-BLAS time of network
training. Both carry a numba ``@njit`` implementation and a vectorized numpy
one; the backend is picked at import time from the ``FLOWCAST_BACKEND``
environment variable ("numba" or "numpy", default numba when importable)
and can be switched at runtime with :func:`set_backend`. All kernels take
and return 2-D arrays (rows are reduced independently over the last axis).
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a hard dep, but stay importable
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        if len(args) == 1 and callable(args[0]):
            return args[0]
        return wrap


# ---------------------------------------------------------------------------
# numpy implementations


def _layernorm_fwd_numpy(x, eps):
    mean = x.mean(axis=1, keepdims=True)
    xc = x - mean
    var = np.mean(xc * xc, axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return xc * rstd, rstd


def _layernorm_bwd_numpy(xhat, rstd, g):
    gm = g.mean(axis=1, keepdims=True)
    gx = np.mean(g * xhat, axis=1, keepdims=True)
    return rstd * (g - gm - xhat * gx)


def _softmax_fwd_numpy(x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def _softmax_bwd_numpy(y, g):
    dot = np.sum(g * y, axis=1, keepdims=True)
    return y * (g - dot)


# ---------------------------------------------------------------------------
# numba implementations (row loops; accumulate in float64)


@njit(cache=True)
def _layernorm_fwd_numba(x, eps):
    n, c = x.shape
    xhat = np.empty_like(x)
    rstd = np.empty((n, 1), dtype=x.dtype)
    for i in range(n):
        m = 0.0
        for j in range(c):
            m += x[i, j]
        m /= c
        v = 0.0
        for j in range(c):
            d = x[i, j] - m
            v += d * d
        v /= c
        r = 1.0 / np.sqrt(v + eps)
        rstd[i, 0] = r
        for j in range(c):
            xhat[i, j] = (x[i, j] - m) * r
    return xhat, rstd


@njit(cache=True)
def _layernorm_bwd_numba(xhat, rstd, g):
    n, c = g.shape
    dx = np.empty_like(g)
    for i in range(n):
        gm = 0.0
        gx = 0.0
        for j in range(c):
            gm += g[i, j]
            gx += g[i, j] * xhat[i, j]
        gm /= c
        gx /= c
        r = rstd[i, 0]
        for j in range(c):
            dx[i, j] = r * (g[i, j] - gm - xhat[i, j] * gx)
    return dx


@njit(cache=True)
def _softmax_fwd_numba(x):
    n, c = x.shape
    y = np.empty_like(x)
    for i in range(n):
        m = x[i, 0]
        for j in range(1, c):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(c):
            e = np.exp(x[i, j] - m)
            y[i, j] = e
            s += e
        for j in range(c):
            y[i, j] /= s
    return y


@njit(cache=True)
def _softmax_bwd_numba(y, g):
    n, c = g.shape
    dx = np.empty_like(g)
    for i in range(n):
        dot = 0.0
        for j in range(c):
            dot += g[i, j] * y[i, j]
        for j in range(c):
            dx[i, j] = y[i, j] * (g[i, j] - dot)
    return dx


# ---------------------------------------------------------------------------
# backend dispatch

_IMPLS = {
    "numpy": {
        "layernorm_fwd": _layernorm_fwd_numpy,
        "layernorm_bwd": _layernorm_bwd_numpy,
        "softmax_fwd": _softmax_fwd_numpy,
        "softmax_bwd": _softmax_bwd_numpy,
    },
    "numba": {
        "layernorm_fwd": _layernorm_fwd_numba,
        "layernorm_bwd": _layernorm_bwd_numba,
        "softmax_fwd": _softmax_fwd_numba,
        "softmax_bwd": _softmax_bwd_numba,
    },
}


def _initial_backend() -> str:
    req = os.environ.get("FLOWCAST_BACKEND", "").strip().lower()
    if req in ("numba", "numpy"):
        if req == "numba" and not NUMBA_AVAILABLE:
            return "numpy"
        return req
    if req:
        raise ValueError(f"FLOWCAST_BACKEND must be 'numba' or 'numpy', got {req!r}")
    return "numba" if NUMBA_AVAILABLE else "numpy"


_BACKEND = _initial_backend()


def active_backend() -> str:
    return _BACKEND


def set_backend(name: str) -> None:
    if name not in _IMPLS:
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not NUMBA_AVAILABLE:
        raise ValueError("numba backend requested but numba is not importable")
    global _BACKEND
    _BACKEND = name


def layernorm_fwd(x: np.ndarray, eps: float = 1e-6):
    """Row-wise layer norm without affine terms. Returns (xhat, rstd)."""
    return _IMPLS[_BACKEND]["layernorm_fwd"](x, eps)


def layernorm_bwd(xhat: np.ndarray, rstd: np.ndarray, g: np.ndarray) -> np.ndarray:
    return _IMPLS[_BACKEND]["layernorm_bwd"](xhat, rstd, g)


def softmax_fwd(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis."""
    return _IMPLS[_BACKEND]["softmax_fwd"](x)


def softmax_bwd(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    return _IMPLS[_BACKEND]["softmax_bwd"](y, g)
