# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
# cython: language_level=3
"""Compiled float32 row kernels.

Every function writes into caller-provided buffers and expects C-contiguous
float32 inputs; :mod:`smoothcert.kernels` handles dispatch and allocation.
The loops are written so gcc can vectorize them (libmvec ``expf``).
"""

from libc.math cimport expf, sqrtf

cdef float GELU_K = 0.7978845608028654
cdef float GELU_C = 0.044715


def softmax_rows(const float[:, ::1] x, float[:, ::1] out, float scale=1.0):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    cdef float m, s, inv
    cdef const float* xr
    cdef float* orow
    with nogil:
        for i in range(n):
            xr = &x[i, 0]
            orow = &out[i, 0]
            m = xr[0]
            for j in range(1, d):
                m = xr[j] if xr[j] > m else m
            for j in range(d):
                orow[j] = expf((xr[j] - m) * scale)
            s = 0
            for j in range(d):
                s += orow[j]
            inv = 1.0 / s
            for j in range(d):
                orow[j] *= inv


def softmax_rows_backward(const float[:, ::1] y, const float[:, ::1] gy, float[:, ::1] out):
    cdef Py_ssize_t n = y.shape[0], d = y.shape[1], i, j
    cdef float dot
    cdef const float* yr
    cdef const float* gr
    cdef float* orow
    with nogil:
        for i in range(n):
            yr = &y[i, 0]
            gr = &gy[i, 0]
            orow = &out[i, 0]
            dot = 0
            for j in range(d):
                dot += yr[j] * gr[j]
            for j in range(d):
                orow[j] = yr[j] * (gr[j] - dot)


def layer_norm_rows(const float[:, ::1] x, const float[::1] gain, const float[::1] bias,
                    float eps, float[:, ::1] out, float[::1] mean, float[::1] rstd):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    cdef float mu, var, r, t
    cdef const float* xr
    cdef float* orow
    cdef float inv_d = 1.0 / d
    with nogil:
        for i in range(n):
            xr = &x[i, 0]
            orow = &out[i, 0]
            mu = 0
            for j in range(d):
                mu += xr[j]
            mu *= inv_d
            var = 0
            for j in range(d):
                t = xr[j] - mu
                var += t * t
            var *= inv_d
            r = 1.0 / sqrtf(var + eps)
            for j in range(d):
                orow[j] = (xr[j] - mu) * r * gain[j] + bias[j]
            mean[i] = mu
            rstd[i] = r


def layer_norm_rows_backward(const float[:, ::1] gy, const float[:, ::1] x,
                             const float[::1] gain, const float[::1] mean,
                             const float[::1] rstd, float[:, ::1] gx,
                             float[::1] ggain, float[::1] gbias):
    """ggain and gbias are accumulated into, so callers pass zeroed buffers."""
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    cdef float mu, r, s1, s2, xh, g
    cdef const float* xr
    cdef const float* gr
    cdef float* orow
    cdef float inv_d = 1.0 / d
    with nogil:
        for i in range(n):
            xr = &x[i, 0]
            gr = &gy[i, 0]
            orow = &gx[i, 0]
            mu = mean[i]
            r = rstd[i]
            s1 = 0
            s2 = 0
            for j in range(d):
                xh = (xr[j] - mu) * r
                g = gr[j] * gain[j]
                s1 += g
                s2 += g * xh
                ggain[j] += gr[j] * xh
                gbias[j] += gr[j]
            s1 *= inv_d
            s2 *= inv_d
            for j in range(d):
                xh = (xr[j] - mu) * r
                orow[j] = r * (gr[j] * gain[j] - s1 - xh * s2)


def gelu(const float[::1] x, float[::1] out):
    cdef Py_ssize_t n = x.shape[0], i
    cdef float v, u
    with nogil:
        for i in range(n):
            v = x[i]
            u = 2 * GELU_K * (v + GELU_C * v * v * v)
            out[i] = v / (1 + expf(-u))


def gelu_backward(const float[::1] x, const float[::1] gy, float[::1] out):
    cdef Py_ssize_t n = x.shape[0], i
    cdef float v, u, s, du
    with nogil:
        for i in range(n):
            v = x[i]
            u = 2 * GELU_K * (v + GELU_C * v * v * v)
            du = 2 * GELU_K * (1 + 3 * GELU_C * v * v)
            s = 1 / (1 + expf(-u))
            out[i] = gy[i] * (s + v * s * (1 - s) * du)
