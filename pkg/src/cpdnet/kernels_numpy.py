"""Pure-numpy compute kernels.

Backend for the hot inner loops (2-D convolution, 2x2 max pooling, bilinear
upsampling) built on BLAS matmuls.  Every kernel is deterministic run to
run.  Convolutions with a single input and output channel (the attention
blur) take a per-tap accumulation path whose addition sequence is identical
for every output element, so blurring a constant map yields an exactly
constant map.  Inputs arrive pre-padded; kernels see only stride/dilation
arithmetic.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided

NAME = "numpy"


def _out_dims(hp: int, wp: int, kh: int, kw: int, stride: int, dilation: int) -> tuple[int, int]:
    oh = (hp - dilation * (kh - 1) - 1) // stride + 1
    ow = (wp - dilation * (kw - 1) - 1) // stride + 1
    return oh, ow


def _tap_slices(dy: int, dx: int, oh: int, ow: int, stride: int, dilation: int):
    ys = slice(dy * dilation, dy * dilation + (oh - 1) * stride + 1, stride)
    xs = slice(dx * dilation, dx * dilation + (ow - 1) * stride + 1, stride)
    return ys, xs


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int,
            oh: int, ow: int) -> np.ndarray:
    """Copy sliding windows into a (n*oh*ow, cin*kh*kw) matrix."""
    n, cin = xp.shape[0], xp.shape[1]
    sn, sc, sh, sw = xp.strides
    win = as_strided(xp, shape=(n, oh, ow, cin, kh, kw),
                     strides=(sn, sh * stride, sw * stride, sc, sh * dilation, sw * dilation))
    return np.ascontiguousarray(win).reshape(n * oh * ow, cin * kh * kw)


def conv2d_forward(xp: np.ndarray, w: np.ndarray, stride: int, dilation: int,
                   cols_out: list | None = None) -> np.ndarray:
    """Correlate padded input ``xp`` (n,ci,hp,wp) with ``w`` (co,ci,kh,kw).
    When ``cols_out`` is given the im2col matrix is appended to it so the
    weight gradient can reuse it."""
    n, cin, hp, wp = xp.shape
    cout, _, kh, kw = w.shape
    oh, ow = _out_dims(hp, wp, kh, kw, stride, dilation)
    if cin == 1 and cout == 1:
        # Uniform per-element accumulation order (see module docstring).
        out = np.zeros((n, 1, oh, ow), dtype=xp.dtype)
        for dy in range(kh):
            for dx in range(kw):
                ys, xs = _tap_slices(dy, dx, oh, ow, stride, dilation)
                out[:, 0] += w[0, 0, dy, dx] * xp[:, 0, ys, xs]
        return out
    cols = _im2col(xp, kh, kw, stride, dilation, oh, ow)
    if cols_out is not None:
        cols_out.append(cols)
    out_mat = cols @ w.reshape(cout, -1).T
    return np.ascontiguousarray(out_mat.reshape(n, oh, ow, cout).transpose(0, 3, 1, 2))


def conv2d_backward_input(g: np.ndarray, w: np.ndarray, xp_shape: tuple,
                          stride: int, dilation: int) -> np.ndarray:
    """Gradient wrt the padded input; caller crops the padding off."""
    n, cout, oh, ow = g.shape
    kh, kw = w.shape[2], w.shape[3]
    gxp = np.zeros(xp_shape, dtype=g.dtype)
    g_nhwc = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
    for dy in range(kh):
        for dx in range(kw):
            ys, xs = _tap_slices(dy, dx, oh, ow, stride, dilation)
            contrib = np.tensordot(g_nhwc, w[:, :, dy, dx], axes=([3], [0]))
            gxp[:, :, ys, xs] += contrib.transpose(0, 3, 1, 2)
    return gxp


def conv2d_backward_weight(g: np.ndarray, xp: np.ndarray, kh: int, kw: int,
                           stride: int, dilation: int,
                           cols: np.ndarray | None = None) -> np.ndarray:
    n, cout, oh, ow = g.shape
    cin = xp.shape[1]
    if cols is not None:
        g_mat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, cout)
        return (g_mat.T @ cols).reshape(cout, cin, kh, kw)
    gw = np.empty((cout, cin, kh, kw), dtype=g.dtype)
    for dy in range(kh):
        for dx in range(kw):
            ys, xs = _tap_slices(dy, dx, oh, ow, stride, dilation)
            gw[:, :, dy, dx] = np.tensordot(g, xp[:, :, ys, xs], axes=([0, 2, 3], [0, 2, 3]))
    return gw


def maxpool2_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2/stride-2 max pool.  Returns (out, argmax) with argmax in 0..3
    flat row-major window order; ties resolve to the first index."""
    n, c, h, w = x.shape
    oh, ow = h // 2, w // 2
    win = x.reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx.astype(np.int8)


def maxpool2_backward(g: np.ndarray, idx: np.ndarray, h: int, w: int) -> np.ndarray:
    n, c, oh, ow = g.shape
    gwin = np.zeros((n, c, oh, ow, 4), dtype=g.dtype)
    np.put_along_axis(gwin, idx.astype(np.int64)[..., None], g[..., None], axis=-1)
    gx = gwin.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
    return np.ascontiguousarray(gx)


def _lerp_axis(n_src: int, factor: int, dtype) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Half-pixel source indices/weights for one axis: src = (dst+0.5)/f - 0.5."""
    dst = np.arange(n_src * factor, dtype=np.float64)
    src = np.clip((dst + 0.5) / factor - 0.5, 0.0, float(n_src - 1))
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_src - 1)
    wgt = (src - i0).astype(dtype)
    return i0, i1, wgt


def upsample_bilinear_forward(x: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return x.copy()
    n, c, h, w = x.shape
    y0, y1, wy = _lerp_axis(h, factor, x.dtype)
    x0, x1, wx = _lerp_axis(w, factor, x.dtype)
    top = x[:, :, y0, :]
    bot = x[:, :, y1, :]
    rows = top + wy[None, None, :, None] * (bot - top)
    left = rows[:, :, :, x0]
    right = rows[:, :, :, x1]
    return left + wx[None, None, None, :] * (right - left)


def _axis_matrix(n_src: int, factor: int, dtype) -> np.ndarray:
    """Dense (n_src*factor, n_src) interpolation matrix for one axis."""
    i0, i1, wgt = _lerp_axis(n_src, factor, dtype)
    m = np.zeros((n_src * factor, n_src), dtype=dtype)
    rows = np.arange(n_src * factor)
    np.add.at(m, (rows, i0), 1 - wgt)
    np.add.at(m, (rows, i1), wgt)
    return m


def upsample_bilinear_backward(g: np.ndarray, factor: int, h: int, w: int) -> np.ndarray:
    if factor == 1:
        return g.copy()
    ry = _axis_matrix(h, factor, g.dtype)
    rx = _axis_matrix(w, factor, g.dtype)
    # gx = Ry^T . g . Rx  (adjoint of the separable interpolation)
    t = np.tensordot(g, rx, axes=([3], [0]))          # (n, c, H*f, w)
    gx = np.tensordot(t.transpose(0, 1, 3, 2), ry, axes=([3], [0]))  # (n, c, w, h)
    return np.ascontiguousarray(gx.transpose(0, 1, 3, 2))
