"""Convolution kernels, the hot inner loops of the network.

Two interchangeable backends compute identical quantities:

- ``numba``: explicit loop nests under ``@njit(parallel=True)``. Threads
  own disjoint output cells and every inner summation runs in a fixed
  order, so results are bit-reproducible at any thread count.
- ``numpy``: vectorized sliding-window/einsum formulations, used when
  numba is unavailable or explicitly requested.

Select with ``ECGFUSION_KERNELS=numba|numpy`` (default: numba when
importable). ``benchmarks/bench_kernels.py`` times one against the other.

All kernels take pre-padded inputs; padding lives in the autodiff layer.
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "backend",
    "conv2d_fwd",
    "conv2d_bwd_input",
    "conv2d_bwd_kernel",
    "depthwise_fwd",
    "depthwise_bwd_input",
    "depthwise_bwd_kernel",
    "IMPLEMENTATIONS",
]


# --- pure-numpy backend ---

def _np_conv2d_fwd(xp, w, stride):
    k = w.shape[2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.einsum("bihwuv,oiuv->bohw", win, w, optimize=True)


def _np_conv2d_bwd_input(dy, w, stride, hp, wp):
    b, _, ho, wo = dy.shape
    ci, k = w.shape[1], w.shape[2]
    dxp = np.zeros((b, ci, hp, wp), dtype=dy.dtype)
    for kh in range(k):
        for kw in range(k):
            t = np.einsum("bohw,oi->bihw", dy, w[:, :, kh, kw], optimize=True)
            dxp[:, :, kh : kh + stride * ho : stride, kw : kw + stride * wo : stride] += t
    return dxp


def _np_conv2d_bwd_kernel(xp, dy, stride, k):
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.einsum("bohw,bihwuv->oiuv", dy, win, optimize=True)


def _np_depthwise_fwd(xp, w, stride):
    k = w.shape[1]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.einsum("bchwuv,cuv->bchw", win, w, optimize=True)


def _np_depthwise_bwd_input(dy, w, stride, hp, wp):
    b, c, ho, wo = dy.shape
    k = w.shape[1]
    dxp = np.zeros((b, c, hp, wp), dtype=dy.dtype)
    for kh in range(k):
        for kw in range(k):
            t = dy * w[None, :, kh, kw, None, None]
            dxp[:, :, kh : kh + stride * ho : stride, kw : kw + stride * wo : stride] += t
    return dxp


def _np_depthwise_bwd_kernel(xp, dy, stride, k):
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.einsum("bchw,bchwuv->cuv", dy, win, optimize=True)


_NUMPY_IMPL = {
    "conv2d_fwd": _np_conv2d_fwd,
    "conv2d_bwd_input": _np_conv2d_bwd_input,
    "conv2d_bwd_kernel": _np_conv2d_bwd_kernel,
    "depthwise_fwd": _np_depthwise_fwd,
    "depthwise_bwd_input": _np_depthwise_bwd_input,
    "depthwise_bwd_kernel": _np_depthwise_bwd_kernel,
}


# --- numba backend ---

def _build_numba_impl():
    from numba import njit, prange

    # stride-1 inner loops run over contiguous row slices so LLVM can
    # vectorize them; the generic strided path handles everything else

    @njit(parallel=True, cache=True)
    def nb_conv2d_fwd(xp, w, stride):
        nb_, ci, hp, wp = xp.shape
        co, _, k, _ = w.shape
        ho = (hp - k) // stride + 1
        wo = (wp - k) // stride + 1
        y = np.zeros((nb_, co, ho, wo), dtype=xp.dtype)
        for bo in prange(nb_ * co):
            b = bo // co
            o = bo % co
            for i in range(ci):
                for kh in range(k):
                    for kw in range(k):
                        wv = w[o, i, kh, kw]
                        for h in range(ho):
                            yr = y[b, o, h]
                            xr = xp[b, i, h * stride + kh]
                            if stride == 1:
                                for x in range(wo):
                                    yr[x] += wv * xr[x + kw]
                            else:
                                for x in range(wo):
                                    yr[x] += wv * xr[x * stride + kw]
        return y

    @njit(parallel=True, cache=True)
    def nb_conv2d_bwd_input(dy, w, stride, hp, wp):
        nb_, co, ho, wo = dy.shape
        ci, k = w.shape[1], w.shape[2]
        dxp = np.zeros((nb_, ci, hp, wp), dtype=dy.dtype)
        for bi in prange(nb_ * ci):
            b = bi // ci
            i = bi % ci
            for o in range(co):
                for kh in range(k):
                    for kw in range(k):
                        wv = w[o, i, kh, kw]
                        for h in range(ho):
                            dr = dxp[b, i, h * stride + kh]
                            gr = dy[b, o, h]
                            if stride == 1:
                                for x in range(wo):
                                    dr[x + kw] += wv * gr[x]
                            else:
                                for x in range(wo):
                                    dr[x * stride + kw] += wv * gr[x]
        return dxp

    @njit(parallel=True, cache=True)
    def nb_conv2d_bwd_kernel(xp, dy, stride, k):
        nb_, ci, hp, wp = xp.shape
        co, ho, wo = dy.shape[1], dy.shape[2], dy.shape[3]
        dw = np.zeros((co, ci, k, k), dtype=xp.dtype)
        # stream each (gradient row, input row) pair once, accumulating
        # all k*k taps while both rows sit in L1
        for oi in prange(co * ci):
            o = oi // ci
            i = oi % ci
            acc = np.zeros((k, k), dtype=xp.dtype)
            for b in range(nb_):
                for h in range(ho):
                    gr = dy[b, o, h]
                    for kh in range(k):
                        xr = xp[b, i, h * stride + kh]
                        for kw in range(k):
                            s = 0.0
                            if stride == 1:
                                for x in range(wo):
                                    s += gr[x] * xr[x + kw]
                            else:
                                for x in range(wo):
                                    s += gr[x] * xr[x * stride + kw]
                            acc[kh, kw] += s
            dw[o, i] = acc
        return dw

    @njit(parallel=True, cache=True)
    def nb_depthwise_fwd(xp, w, stride):
        nb_, c, hp, wp = xp.shape
        k = w.shape[1]
        ho = (hp - k) // stride + 1
        wo = (wp - k) // stride + 1
        y = np.zeros((nb_, c, ho, wo), dtype=xp.dtype)
        for bc in prange(nb_ * c):
            b = bc // c
            ch = bc % c
            for kh in range(k):
                for kw in range(k):
                    wv = w[ch, kh, kw]
                    for h in range(ho):
                        yr = y[b, ch, h]
                        xr = xp[b, ch, h * stride + kh]
                        if stride == 1:
                            for x in range(wo):
                                yr[x] += wv * xr[x + kw]
                        else:
                            for x in range(wo):
                                yr[x] += wv * xr[x * stride + kw]
        return y

    @njit(parallel=True, cache=True)
    def nb_depthwise_bwd_input(dy, w, stride, hp, wp):
        nb_, c, ho, wo = dy.shape
        k = w.shape[1]
        dxp = np.zeros((nb_, c, hp, wp), dtype=dy.dtype)
        for bc in prange(nb_ * c):
            b = bc // c
            ch = bc % c
            for kh in range(k):
                for kw in range(k):
                    wv = w[ch, kh, kw]
                    for h in range(ho):
                        dr = dxp[b, ch, h * stride + kh]
                        gr = dy[b, ch, h]
                        if stride == 1:
                            for x in range(wo):
                                dr[x + kw] += wv * gr[x]
                        else:
                            for x in range(wo):
                                dr[x * stride + kw] += wv * gr[x]
        return dxp

    @njit(parallel=True, cache=True)
    def nb_depthwise_bwd_kernel(xp, dy, stride, k):
        nb_, c, hp, wp = xp.shape
        ho, wo = dy.shape[2], dy.shape[3]
        dw = np.zeros((c, k, k), dtype=xp.dtype)
        for ch in prange(c):
            acc = np.zeros((k, k), dtype=xp.dtype)
            for b in range(nb_):
                for h in range(ho):
                    gr = dy[b, ch, h]
                    for kh in range(k):
                        xr = xp[b, ch, h * stride + kh]
                        for kw in range(k):
                            s = 0.0
                            if stride == 1:
                                for x in range(wo):
                                    s += gr[x] * xr[x + kw]
                            else:
                                for x in range(wo):
                                    s += gr[x] * xr[x * stride + kw]
                            acc[kh, kw] += s
            dw[ch] = acc
        return dw

    return {
        "conv2d_fwd": nb_conv2d_fwd,
        "conv2d_bwd_input": nb_conv2d_bwd_input,
        "conv2d_bwd_kernel": nb_conv2d_bwd_kernel,
        "depthwise_fwd": nb_depthwise_fwd,
        "depthwise_bwd_input": nb_depthwise_bwd_input,
        "depthwise_bwd_kernel": nb_depthwise_bwd_kernel,
    }


IMPLEMENTATIONS: dict[str, dict] = {"numpy": _NUMPY_IMPL}

_requested = os.environ.get("ECGFUSION_KERNELS", "auto").lower()
if _requested not in ("auto", "numba", "numpy"):
    raise ValueError(f"ECGFUSION_KERNELS must be numba|numpy|auto, got {_requested!r}")

_BACKEND = "numpy"
if _requested in ("auto", "numba"):
    try:
        IMPLEMENTATIONS["numba"] = _build_numba_impl()
        _BACKEND = "numba"
    except ImportError:
        if _requested == "numba":
            raise
        _BACKEND = "numpy"

_active = IMPLEMENTATIONS[_BACKEND]


def backend() -> str:
    """Name of the kernel backend in use."""
    return _BACKEND


def conv2d_fwd(xp, w, stride):
    return _active["conv2d_fwd"](xp, w, stride)


def conv2d_bwd_input(dy, w, stride, hp, wp):
    return _active["conv2d_bwd_input"](dy, w, stride, hp, wp)


def conv2d_bwd_kernel(xp, dy, stride, k):
    return _active["conv2d_bwd_kernel"](xp, dy, stride, k)


def depthwise_fwd(xp, w, stride):
    return _active["depthwise_fwd"](xp, w, stride)


def depthwise_bwd_input(dy, w, stride, hp, wp):
    return _active["depthwise_bwd_input"](dy, w, stride, hp, wp)


def depthwise_bwd_kernel(xp, dy, stride, k):
    return _active["depthwise_bwd_kernel"](xp, dy, stride, k)
