# cython: language_level=3
"""Compiled inner loops: rounding, segment sums and the gather/scatter
around 2-D convolution.

Convolutions unfold the input into a patch matrix here and hand the matrix
product to numpy, so BLAS does the multiply-adds.  Every routine mirrors a
function in ``_pykernels`` and must agree with it to the last bit for
rounding and segment sums, and to within BLAS reassociation error for
convolutions.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


cdef inline double _rha(double v) nogil:
    cdef double a = -v if v < 0 else v
    cdef double f = floor(a)
    if a - f >= 0.5:
        f += 1.0
    return -f if v < 0 else f


def round_half_away(x):
    cdef cnp.ndarray[double, ndim=1] src = np.ascontiguousarray(x, dtype=np.float64).ravel()
    cdef cnp.ndarray[double, ndim=1] out = np.empty_like(src)
    cdef double[::1] s = src
    cdef double[::1] o = out
    cdef Py_ssize_t i, n = s.shape[0]
    with nogil:
        for i in range(n):
            o[i] = _rha(s[i])
    return out.reshape(np.shape(x))


def quantize_grid(x, double levels):
    cdef cnp.ndarray[double, ndim=1] src = np.ascontiguousarray(x, dtype=np.float64).ravel()
    cdef cnp.ndarray[double, ndim=1] out = np.empty_like(src)
    cdef double[::1] s = src
    cdef double[::1] o = out
    cdef Py_ssize_t i, n = s.shape[0]
    with nogil:
        for i in range(n):
            o[i] = _rha(s[i] * levels) / levels
    return out.reshape(np.shape(x))


def segment_sum(values, idx, Py_ssize_t nbins):
    cdef double[::1] v = np.ascontiguousarray(values, dtype=np.float64).ravel()
    cdef long[::1] k = np.ascontiguousarray(idx, dtype=np.int64).ravel()
    cdef cnp.ndarray[double, ndim=1] out = np.zeros(nbins, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t i, n = v.shape[0]
    with nogil:
        for i in range(n):
            o[k[i]] += v[i]
    return out


cdef inline void _valid(Py_ssize_t k, Py_ssize_t pad, Py_ssize_t stride, Py_ssize_t size,
                        Py_ssize_t count, Py_ssize_t* lo, Py_ssize_t* hi) nogil:
    # output indices i in [lo, hi) with 0 <= i * stride + k - pad < size
    cdef Py_ssize_t a = pad - k
    lo[0] = (a + stride - 1) // stride if a > 0 else 0
    hi[0] = (size - 1 + a) // stride + 1 if size - 1 + a >= 0 else 0
    if hi[0] > count:
        hi[0] = count
    if lo[0] > hi[0]:
        lo[0] = hi[0]


cdef _im2col(double[:, :, :, ::1] X, Py_ssize_t KH, Py_ssize_t KW, Py_ssize_t stride,
             Py_ssize_t pad, Py_ssize_t OH, Py_ssize_t OW):
    # rows (n, i, j), columns (c, p, q); out-of-range taps stay zero
    cdef Py_ssize_t N = X.shape[0], C = X.shape[1], H = X.shape[2], Wd = X.shape[3]
    cols_arr = np.zeros((N * OH * OW, C * KH * KW), dtype=np.float64)
    cdef double[:, ::1] cols = cols_arr
    cdef Py_ssize_t n, c, i, j, p, q, i0, i1, j0, j1, row, col
    with nogil:
        for c in range(C):
            for p in range(KH):
                _valid(p, pad, stride, H, OH, &i0, &i1)
                for q in range(KW):
                    _valid(q, pad, stride, Wd, OW, &j0, &j1)
                    col = (c * KH + p) * KW + q
                    for n in range(N):
                        for i in range(i0, i1):
                            row = (n * OH + i) * OW
                            for j in range(j0, j1):
                                cols[row + j, col] = X[n, c, i * stride + p - pad,
                                                       j * stride + q - pad]
    return cols_arr


def conv2d_forward(x, w, Py_ssize_t stride, Py_ssize_t pad):
    cdef double[:, :, :, ::1] X = np.ascontiguousarray(x, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    cdef Py_ssize_t N = X.shape[0], H = X.shape[2], Wd = X.shape[3]
    cdef Py_ssize_t O = w.shape[0], KH = w.shape[2], KW = w.shape[3]
    cdef Py_ssize_t OH = (H + 2 * pad - KH) // stride + 1
    cdef Py_ssize_t OW = (Wd + 2 * pad - KW) // stride + 1
    cols = _im2col(X, KH, KW, stride, pad, OH, OW)
    out = cols @ w.reshape(O, -1).T
    return np.ascontiguousarray(out.reshape(N, OH, OW, O).transpose(0, 3, 1, 2))


def conv2d_backward_input(g, w, tuple x_shape, Py_ssize_t stride, Py_ssize_t pad):
    g = np.asarray(g, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    cdef Py_ssize_t N = x_shape[0], C = x_shape[1], H = x_shape[2], Wd = x_shape[3]
    cdef Py_ssize_t O = w.shape[0], KH = w.shape[2], KW = w.shape[3]
    cdef Py_ssize_t OH = g.shape[2], OW = g.shape[3]
    dcols_arr = np.ascontiguousarray(g.transpose(0, 2, 3, 1).reshape(-1, O) @ w.reshape(O, -1))
    cdef double[:, ::1] dcols = dcols_arr
    gx_arr = np.zeros((N, C, H, Wd), dtype=np.float64)
    cdef double[:, :, :, ::1] GX = gx_arr
    cdef Py_ssize_t n, c, i, j, p, q, i0, i1, j0, j1, row, col
    with nogil:
        for c in range(C):
            for p in range(KH):
                _valid(p, pad, stride, H, OH, &i0, &i1)
                for q in range(KW):
                    _valid(q, pad, stride, Wd, OW, &j0, &j1)
                    col = (c * KH + p) * KW + q
                    for n in range(N):
                        for i in range(i0, i1):
                            row = (n * OH + i) * OW
                            for j in range(j0, j1):
                                GX[n, c, i * stride + p - pad, j * stride + q - pad] += (
                                    dcols[row + j, col])
    return gx_arr


def conv2d_backward_weight(g, x, tuple w_shape, Py_ssize_t stride, Py_ssize_t pad):
    cdef double[:, :, :, ::1] X = np.ascontiguousarray(x, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    cdef Py_ssize_t O = w_shape[0], KH = w_shape[2], KW = w_shape[3]
    cdef Py_ssize_t OH = g.shape[2], OW = g.shape[3]
    cols = _im2col(X, KH, KW, stride, pad, OH, OW)
    gw = g.transpose(1, 0, 2, 3).reshape(O, -1) @ cols
    return np.ascontiguousarray(gw.reshape(w_shape))
