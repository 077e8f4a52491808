# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled forward kernels for inference-time scans.

attention_forward: fused scores + additive bias + stable softmax + value mix
    over a (G, n, dh) stack of heads.
downsample2x: 2x2 area averaging of an HxWxC image.

Both accept float32 or float64 C-contiguous arrays.
"""
import numpy as np
from libc.math cimport exp, expf

ctypedef fused real:
    float
    double


cdef void _attention(const real* q, const real* k, const real* v, const real* bias, real* out,
                     real* row, real* kt, real* vt, Py_ssize_t G, Py_ssize_t nq, Py_ssize_t nk,
                     Py_ssize_t dh, real sc) noexcept nogil:
    cdef Py_ssize_t g, i, j, t
    cdef real m, s, acc, qt
    cdef const real* qi
    cdef const real* bi
    cdef real* oi
    cdef real* ktt
    cdef real* vtt
    for g in range(G):
        # keys (pre-scaled) and values transposed once per stack: every inner loop
        # below then streams over contiguous key positions
        for j in range(nk):
            for t in range(dh):
                kt[t * nk + j] = k[(g * nk + j) * dh + t] * sc
                vt[t * nk + j] = v[(g * nk + j) * dh + t]
        for i in range(nq):
            qi = q + (g * nq + i) * dh
            oi = out + (g * nq + i) * dh
            bi = bias + (g * nq + i) * nk
            for j in range(nk):
                row[j] = bi[j]
            for t in range(dh):
                qt = qi[t]
                ktt = kt + t * nk
                for j in range(nk):
                    row[j] += qt * ktt[j]
            m = row[0]
            for j in range(1, nk):
                if row[j] > m:
                    m = row[j]
            s = 0
            for j in range(nk):
                if real is float:
                    row[j] = expf(row[j] - m)
                else:
                    row[j] = exp(row[j] - m)
                s += row[j]
            s = 1 / s
            for t in range(dh):
                vtt = vt + t * nk
                acc = 0
                for j in range(nk):
                    acc += row[j] * vtt[j]
                oi[t] = acc * s


def attention_forward(q, k, v, bias, double scale):
    """softmax(q k^T * scale + bias) v for q (G, nq, dh), k/v (G, nk, dh), bias (G, nq, nk)."""
    G, nq, dh = q.shape
    nk = k.shape[1]
    out = np.zeros((G, nq, dh), dtype=q.dtype)
    if nq == 0 or nk == 0 or G == 0:
        return out
    row = np.empty(nk, dtype=q.dtype)
    kt = np.empty((dh, nk), dtype=q.dtype)
    vt = np.empty((dh, nk), dtype=q.dtype)
    if q.dtype == np.float32:
        _run_f(q, k, v, bias, out, row, kt, vt, <float>scale)
    else:
        _run_d(q, k, v, bias, out, row, kt, vt, scale)
    return out


cdef _run_f(const float[:, :, ::1] q, const float[:, :, ::1] k, const float[:, :, ::1] v,
            const float[:, :, ::1] b, float[:, :, ::1] o, float[::1] row, float[:, ::1] kt,
            float[:, ::1] vt, float sc):
    with nogil:
        _attention(&q[0, 0, 0], &k[0, 0, 0], &v[0, 0, 0], &b[0, 0, 0], &o[0, 0, 0], &row[0],
                   &kt[0, 0], &vt[0, 0], q.shape[0], q.shape[1], k.shape[1], q.shape[2], sc)


cdef _run_d(const double[:, :, ::1] q, const double[:, :, ::1] k, const double[:, :, ::1] v,
            const double[:, :, ::1] b, double[:, :, ::1] o, double[::1] row, double[:, ::1] kt,
            double[:, ::1] vt, double sc):
    with nogil:
        _attention(&q[0, 0, 0], &k[0, 0, 0], &v[0, 0, 0], &b[0, 0, 0], &o[0, 0, 0], &row[0],
                   &kt[0, 0], &vt[0, 0], q.shape[0], q.shape[1], k.shape[1], q.shape[2], sc)


cdef void _down(const real* img, real* out, Py_ssize_t H, Py_ssize_t W, Py_ssize_t C) noexcept nogil:
    cdef Py_ssize_t y, x, c, r0, r1
    cdef Py_ssize_t W2 = 2 * W
    for y in range(H):
        r0 = (2 * y) * W2 * C
        r1 = (2 * y + 1) * W2 * C
        for x in range(W):
            for c in range(C):
                out[(y * W + x) * C + c] = <real>(0.25 * (
                    <double>img[r0 + 2 * x * C + c] + img[r0 + (2 * x + 1) * C + c]
                    + img[r1 + 2 * x * C + c] + img[r1 + (2 * x + 1) * C + c]))


def downsample2x(img):
    H, W, C = img.shape[0] // 2, img.shape[1] // 2, img.shape[2]
    out = np.empty((H, W, C), dtype=img.dtype)
    if out.size == 0:
        return out
    if img.dtype == np.float32:
        _down_f(img, out)
    else:
        _down_d(img, out)
    return out


cdef _down_f(const float[:, :, ::1] img, float[:, :, ::1] out):
    with nogil:
        _down(&img[0, 0, 0], &out[0, 0, 0], out.shape[0], out.shape[1], out.shape[2])


cdef _down_d(const double[:, :, ::1] img, double[:, :, ::1] out):
    with nogil:
        _down(&img[0, 0, 0], &out[0, 0, 0], out.shape[0], out.shape[1], out.shape[2])
