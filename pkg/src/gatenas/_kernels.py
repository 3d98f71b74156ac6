"""Numba depthwise-convolution kernels.

Plain sequential loops, no fastmath: accumulation order is fixed (kernel
row-major), so results are deterministic and match the numpy fallback.
Compiled lazily and cached on disk.
"""

import numba
import numpy as np


@numba.njit(cache=True)
def dw_fwd(xp, w, stride, dil, out):
    n, c, _, _ = xp.shape
    kh, kw = w.shape[1], w.shape[2]
    ho, wo = out.shape[2], out.shape[3]
    for ni in range(n):
        for ci in range(c):
            for oy in range(ho):
                ybase = oy * stride
                for ox in range(wo):
                    xbase = ox * stride
                    acc = 0.0
                    for i in range(kh):
                        for j in range(kw):
                            acc += xp[ni, ci, ybase + i * dil, xbase + j * dil] \
                                * w[ci, i, j]
                    out[ni, ci, oy, ox] = acc


@numba.njit(cache=True)
def dw_bwd_x(g, w, stride, dil, gxp):
    n, c, ho, wo = g.shape
    kh, kw = w.shape[1], w.shape[2]
    for ni in range(n):
        for ci in range(c):
            for oy in range(ho):
                ybase = oy * stride
                for ox in range(wo):
                    xbase = ox * stride
                    gv = g[ni, ci, oy, ox]
                    for i in range(kh):
                        for j in range(kw):
                            gxp[ni, ci, ybase + i * dil, xbase + j * dil] += \
                                gv * w[ci, i, j]


@numba.njit(cache=True)
def dw_bwd_w(g, xp, stride, dil, gw):
    n, c, ho, wo = g.shape
    kh, kw = gw.shape[1], gw.shape[2]
    for ci in range(c):
        for i in range(kh):
            for j in range(kw):
                acc = 0.0
                for ni in range(n):
                    for oy in range(ho):
                        ybase = oy * stride + i * dil
                        for ox in range(wo):
                            acc += g[ni, ci, oy, ox] \
                                * xp[ni, ci, ybase, ox * stride + j * dil]
                gw[ci, i, j] = acc


def warmup():
    """Force JIT compilation of all kernels (tiny inputs)."""
    xp = np.zeros((1, 1, 3, 3))
    w = np.zeros((1, 3, 3))
    out = np.zeros((1, 1, 1, 1))
    dw_fwd(xp, w, 1, 1, out)
    dw_bwd_x(out, w, 1, 1, xp.copy())
    dw_bwd_w(out, xp, 1, 1, w.copy())
