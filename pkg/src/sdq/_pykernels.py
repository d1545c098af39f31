"""Pure-numpy versions of the compiled kernels in ``_ckernels.pyx``."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    a = np.abs(x)
    f = np.floor(a)
    f = f + (a - f >= 0.5)
    return np.copysign(f, x)


def quantize_grid(x, levels):
    return round_half_away(np.asarray(x, dtype=np.float64) * levels) / levels


def segment_sum(values, idx, nbins):
    values = np.asarray(values, dtype=np.float64).ravel()
    idx = np.asarray(idx, dtype=np.int64).ravel()
    # bincount accumulates sequentially, matching the compiled loop order
    return np.bincount(idx, weights=values, minlength=nbins).astype(np.float64)


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _windows(x, kh, kw, stride):
    # (N, C, OH, OW, KH, KW)
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d_forward(x, w, stride, pad):
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    win = _windows(_pad(x, pad), w.shape[2], w.shape[3], stride)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N, OH, OW, O
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward_input(g, w, x_shape, stride, pad):
    g = np.asarray(g, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, c, h, wd = x_shape
    kh, kw = w.shape[2], w.shape[3]
    oh, ow = g.shape[2], g.shape[3]
    cols = np.tensordot(g, w, axes=([1], [0]))  # N, OH, OW, C, KH, KW
    gx = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    for p in range(kh):
        for q in range(kw):
            gx[:, :, p:p + stride * oh:stride, q:q + stride * ow:stride] += (
                cols[:, :, :, :, p, q].transpose(0, 3, 1, 2)
            )
    if pad:
        gx = gx[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(gx)


def conv2d_backward_weight(g, x, w_shape, stride, pad):
    g = np.asarray(g, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    win = _windows(_pad(x, pad), w_shape[2], w_shape[3], stride)
    return np.ascontiguousarray(np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])))
