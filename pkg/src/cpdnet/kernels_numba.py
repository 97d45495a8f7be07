"""Numba-compiled compute kernels.

Same contracts as kernels_numpy; loops are fully scalar with the innermost
index running over the contiguous output row, which LLVM vectorizes without
reassociation.  The per-output-element accumulation order is fixed
((i, dy, dx) for convolution), which keeps results deterministic and lets a
constant map stay exactly constant under a normalized blur kernel.  No
fastmath: IEEE ordering is part of the contract.
"""

import numpy as np
from numba import njit

NAME = "numba"


@njit(cache=True)
def _conv2d_forward(xp, w, stride, dilation, out):
    n, cin, hp, wp = xp.shape
    cout, _, kh, kw = w.shape
    oh, ow = out.shape[2], out.shape[3]
    for b in range(n):
        for o in range(cout):
            for y in range(oh):
                dst = out[b, o, y]
                for i in range(cin):
                    for dy in range(kh):
                        src = xp[b, i, y * stride + dy * dilation]
                        for dx in range(kw):
                            wv = w[o, i, dy, dx]
                            x0 = dx * dilation
                            if stride == 1:
                                for x in range(ow):
                                    dst[x] += wv * src[x0 + x]
                            else:
                                for x in range(ow):
                                    dst[x] += wv * src[x0 + x * stride]
    return out


def conv2d_forward(xp: np.ndarray, w: np.ndarray, stride: int, dilation: int,
                   cols_out: list | None = None) -> np.ndarray:
    # cols_out is a numpy-backend optimization hook; nothing to retain here.
    n, cin, hp, wp = xp.shape
    cout, _, kh, kw = w.shape
    oh = (hp - dilation * (kh - 1) - 1) // stride + 1
    ow = (wp - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, cout, oh, ow), dtype=xp.dtype)
    return _conv2d_forward(xp, w, stride, dilation, out)


@njit(cache=True)
def _conv2d_backward_input(g, w, stride, dilation, gxp):
    n, cout, oh, ow = g.shape
    cin, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    for b in range(n):
        for o in range(cout):
            for y in range(oh):
                grow = g[b, o, y]
                for i in range(cin):
                    for dy in range(kh):
                        dst = gxp[b, i, y * stride + dy * dilation]
                        for dx in range(kw):
                            wv = w[o, i, dy, dx]
                            x0 = dx * dilation
                            if stride == 1:
                                for x in range(ow):
                                    dst[x0 + x] += wv * grow[x]
                            else:
                                for x in range(ow):
                                    dst[x0 + x * stride] += wv * grow[x]
    return gxp


def conv2d_backward_input(g: np.ndarray, w: np.ndarray, xp_shape: tuple,
                          stride: int, dilation: int) -> np.ndarray:
    gxp = np.zeros(xp_shape, dtype=g.dtype)
    return _conv2d_backward_input(g, w, stride, dilation, gxp)


@njit(cache=True)
def _conv2d_backward_weight(g, xp, stride, dilation, gw):
    n, cout, oh, ow = g.shape
    cin, kh, kw = gw.shape[1], gw.shape[2], gw.shape[3]
    # Four independent partial sums make the reduction vectorizable while
    # keeping a fixed, input-independent accumulation order.
    for o in range(cout):
        for i in range(cin):
            for dy in range(kh):
                for dx in range(kw):
                    x0 = dx * dilation
                    a0 = 0.0
                    a1 = 0.0
                    a2 = 0.0
                    a3 = 0.0
                    for b in range(n):
                        for y in range(oh):
                            grow = g[b, o, y]
                            xrow = xp[b, i, y * stride + dy * dilation]
                            m4 = ow - (ow & 3)
                            if stride == 1:
                                for x in range(0, m4, 4):
                                    a0 += grow[x] * xrow[x0 + x]
                                    a1 += grow[x + 1] * xrow[x0 + x + 1]
                                    a2 += grow[x + 2] * xrow[x0 + x + 2]
                                    a3 += grow[x + 3] * xrow[x0 + x + 3]
                                for x in range(m4, ow):
                                    a0 += grow[x] * xrow[x0 + x]
                            else:
                                for x in range(ow):
                                    a0 += grow[x] * xrow[x0 + x * stride]
                    gw[o, i, dy, dx] = ((a0 + a1) + (a2 + a3))
    return gw


def conv2d_backward_weight(g: np.ndarray, xp: np.ndarray, kh: int, kw: int,
                           stride: int, dilation: int,
                           cols: np.ndarray | None = None) -> np.ndarray:
    gw = np.zeros((g.shape[1], xp.shape[1], kh, kw), dtype=g.dtype)
    return _conv2d_backward_weight(g, xp, stride, dilation, gw)


@njit(cache=True)
def _maxpool2_forward(x, out, idx):
    n, c, oh, ow = out.shape
    for b in range(n):
        for ch in range(c):
            for y in range(oh):
                for x_ in range(ow):
                    best = x[b, ch, 2 * y, 2 * x_]
                    arg = 0
                    k = 1
                    for dy in range(2):
                        for dx in range(2):
                            if dy == 0 and dx == 0:
                                continue
                            v = x[b, ch, 2 * y + dy, 2 * x_ + dx]
                            if v > best:
                                best = v
                                arg = k
                            k += 1
                    out[b, ch, y, x_] = best
                    idx[b, ch, y, x_] = arg
    return out, idx


def maxpool2_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n, c, h, w = x.shape
    out = np.empty((n, c, h // 2, w // 2), dtype=x.dtype)
    idx = np.empty((n, c, h // 2, w // 2), dtype=np.int8)
    return _maxpool2_forward(x, out, idx)


@njit(cache=True)
def _maxpool2_backward(g, idx, gx):
    n, c, oh, ow = g.shape
    for b in range(n):
        for ch in range(c):
            for y in range(oh):
                for x_ in range(ow):
                    k = idx[b, ch, y, x_]
                    gx[b, ch, 2 * y + k // 2, 2 * x_ + k % 2] += g[b, ch, y, x_]
    return gx


def maxpool2_backward(g: np.ndarray, idx: np.ndarray, h: int, w: int) -> np.ndarray:
    gx = np.zeros((g.shape[0], g.shape[1], h, w), dtype=g.dtype)
    return _maxpool2_backward(g, idx, gx)


def _lerp_axis(n_src: int, factor: int, dtype):
    dst = np.arange(n_src * factor, dtype=np.float64)
    src = np.clip((dst + 0.5) / factor - 0.5, 0.0, float(n_src - 1))
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_src - 1)
    wgt = (src - i0).astype(dtype)
    return i0, i1, wgt


@njit(cache=True)
def _upsample_forward(x, y0, y1, wy, x0, x1, wx, out):
    n, c, ho, wo = out.shape
    for b in range(n):
        for ch in range(c):
            for y in range(ho):
                t0, t1, ty = y0[y], y1[y], wy[y]
                for xx in range(wo):
                    s0, s1, tx = x0[xx], x1[xx], wx[xx]
                    a = x[b, ch, t0, s0] + tx * (x[b, ch, t0, s1] - x[b, ch, t0, s0])
                    bb = x[b, ch, t1, s0] + tx * (x[b, ch, t1, s1] - x[b, ch, t1, s0])
                    out[b, ch, y, xx] = a + ty * (bb - a)
    return out


def upsample_bilinear_forward(x: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return x.copy()
    n, c, h, w = x.shape
    y0, y1, wy = _lerp_axis(h, factor, x.dtype)
    x0, x1, wx = _lerp_axis(w, factor, x.dtype)
    out = np.empty((n, c, h * factor, w * factor), dtype=x.dtype)
    return _upsample_forward(x, y0, y1, wy, x0, x1, wx, out)


@njit(cache=True)
def _upsample_backward(g, y0, y1, wy, x0, x1, wx, gx):
    n, c, ho, wo = g.shape
    for b in range(n):
        for ch in range(c):
            for y in range(ho):
                t0, t1, ty = y0[y], y1[y], wy[y]
                for xx in range(wo):
                    s0, s1, tx = x0[xx], x1[xx], wx[xx]
                    gv = g[b, ch, y, xx]
                    gx[b, ch, t0, s0] += gv * (1 - ty) * (1 - tx)
                    gx[b, ch, t0, s1] += gv * (1 - ty) * tx
                    gx[b, ch, t1, s0] += gv * ty * (1 - tx)
                    gx[b, ch, t1, s1] += gv * ty * tx
    return gx


def upsample_bilinear_backward(g: np.ndarray, factor: int, h: int, w: int) -> np.ndarray:
    if factor == 1:
        return g.copy()
    y0, y1, wy = _lerp_axis(h, factor, g.dtype)
    x0, x1, wx = _lerp_axis(w, factor, g.dtype)
    gx = np.zeros((g.shape[0], g.shape[1], h, w), dtype=g.dtype)
    return _upsample_backward(g, y0, y1, wy, x0, x1, wx, gx)
