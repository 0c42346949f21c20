"""Hot gather/scatter kernels for strided convolutions.

Two interchangeable implementations live here: numba ``@njit`` loops and a
pure-numpy path built on ``sliding_window_view``.  The backend is chosen once
at import time from the ``GROUNDVIEW_BACKEND`` environment variable
(``numba`` or ``numpy``); when unset, numba is used if it imports.

im2col is a pure copy and agrees bit-for-bit across backends.  col2im sums
overlapping windows in a different order per backend, so the two agree to
float rounding only; each backend on its own is fully deterministic.
"""
import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False


def _resolve_backend():
    requested = os.environ.get("GROUNDVIEW_BACKEND", "").strip().lower()
    if requested in ("", "auto"):
        return "numba" if HAVE_NUMBA else "numpy"
    if requested not in ("numba", "numpy"):
        raise ValueError(f"GROUNDVIEW_BACKEND must be 'numba' or 'numpy', got {requested!r}")
    if requested == "numba" and not HAVE_NUMBA:
        raise ImportError("GROUNDVIEW_BACKEND=numba but numba is not installed")
    return requested


BACKEND = _resolve_backend()


# ---------------------------------------------------------------------------
# numpy path

def im2col_numpy(xp, k, s, ho, wo):
    """Gather (N, ho, wo, k, k, C) windows from an already padded NHWC array."""
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # N, H', W', C, k, k
    win = win[:, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))


def col2im_numpy(cols, hp, wp, s):
    """Scatter-add (N, ho, wo, k, k, C) windows into a padded (N, hp, wp, C) array."""
    n, ho, wo, k, _, c = cols.shape
    out = np.zeros((n, hp, wp, c), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, i : i + s * ho : s, j : j + s * wo : s, :] += cols[:, :, :, i, j, :]
    return out


# ---------------------------------------------------------------------------
# numba path

if HAVE_NUMBA:

    @njit(cache=True)
    def _im2col_nb(xp, k, s, ho, wo):
        n, _, wp, c = xp.shape
        src = xp.reshape(n, xp.shape[1], wp * c)
        out = np.empty((n, ho, wo, k, k * c), dtype=xp.dtype)
        kc = k * c
        for b in range(n):
            for y in range(ho):
                for i in range(k):
                    row = src[b, y * s + i]
                    for x in range(wo):
                        base = x * s * c
                        dst = out[b, y, x, i]
                        for t in range(kc):
                            dst[t] = row[base + t]
        return out.reshape(n, ho, wo, k, k, c)

    @njit(cache=True)
    def _col2im_nb(cols, hp, wp, s):
        n, ho, wo, k, _, c = cols.shape
        kc = k * c
        src = cols.reshape(n, ho, wo, k, kc)
        out = np.zeros((n, hp, wp * c), dtype=cols.dtype)
        for b in range(n):
            for y in range(ho):
                for i in range(k):
                    row = out[b, y * s + i]
                    for x in range(wo):
                        base = x * s * c
                        seg = src[b, y, x, i]
                        for t in range(kc):
                            row[base + t] += seg[t]
        return out.reshape(n, hp, wp, c)

    def im2col_numba(xp, k, s, ho, wo):
        return _im2col_nb(np.ascontiguousarray(xp), k, s, ho, wo)

    def col2im_numba(cols, hp, wp, s):
        return _col2im_nb(np.ascontiguousarray(cols), hp, wp, s)


def get_kernels(backend=None):
    """Return the ``(im2col, col2im)`` pair for *backend* (default: active)."""
    backend = backend or BACKEND
    if backend == "numba":
        if not HAVE_NUMBA:
            raise ImportError("numba backend requested but numba is not installed")
        return im2col_numba, col2im_numba
    if backend == "numpy":
        return im2col_numpy, col2im_numpy
    raise ValueError(f"unknown backend {backend!r}")


im2col, col2im = get_kernels()
