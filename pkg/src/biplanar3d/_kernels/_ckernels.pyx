# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the im2col/col2im and ray-integration kernels."""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()

ctypedef fused real:
    float
    double


def _im2col3d(real[:, :, :, ::1] xpad, int kh, int kw, int kd, int stride,
              real[:, :, :, ::1] out):
    cdef Py_ssize_t oh = out.shape[0], ow = out.shape[1], od = out.shape[2]
    cdef Py_ssize_t c = xpad.shape[3]
    cdef Py_ssize_t i, j, l, a, b, e, ch, col
    with nogil:
        for i in range(oh):
            for j in range(ow):
                for l in range(od):
                    col = 0
                    for a in range(kh):
                        for b in range(kw):
                            for e in range(kd):
                                for ch in range(c):
                                    out[i, j, l, col] = xpad[i * stride + a, j * stride + b,
                                                             l * stride + e, ch]
                                    col += 1


def _col2im3d(real[:, :, :, ::1] cols, int kh, int kw, int kd, int stride,
              real[:, :, :, ::1] out):
    cdef Py_ssize_t oh = cols.shape[0], ow = cols.shape[1], od = cols.shape[2]
    cdef Py_ssize_t c = out.shape[3]
    cdef Py_ssize_t i, j, l, a, b, e, ch, col
    with nogil:
        for i in range(oh):
            for j in range(ow):
                for l in range(od):
                    col = 0
                    for a in range(kh):
                        for b in range(kw):
                            for e in range(kd):
                                for ch in range(c):
                                    out[i * stride + a, j * stride + b,
                                        l * stride + e, ch] += cols[i, j, l, col]
                                    col += 1


def im2col3d(xpad, k, int stride):
    xpad = np.ascontiguousarray(xpad)
    kh, kw, kd = k
    hp, wp, dp, c = xpad.shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    od = (dp - kd) // stride + 1
    out = np.empty((oh, ow, od, kh * kw * kd * c), dtype=xpad.dtype)
    _im2col3d(xpad, kh, kw, kd, stride, out)
    return out


def col2im3d(cols, padded_shape, k, int stride):
    cols = np.ascontiguousarray(cols)
    kh, kw, kd = k
    out = np.zeros(tuple(padded_shape), dtype=cols.dtype)
    _col2im3d(cols, kh, kw, kd, stride, out)
    return out


cdef inline double _sample(double[:, :, ::1] mu, double x, double y, double z) nogil:
    cdef Py_ssize_t nx = mu.shape[0], ny = mu.shape[1], nz = mu.shape[2]
    cdef double fx = floor(x), fy = floor(y), fz = floor(z)
    cdef Py_ssize_t ix = <Py_ssize_t>fx, iy = <Py_ssize_t>fy, iz = <Py_ssize_t>fz
    cdef double tx = x - fx, ty = y - fy, tz = z - fz
    cdef double acc = 0.0, w
    cdef int a, b, e
    cdef Py_ssize_t jx, jy, jz
    if ix < -1 or iy < -1 or iz < -1 or ix >= nx or iy >= ny or iz >= nz:
        return 0.0
    for a in range(2):
        jx = ix + a
        if jx < 0 or jx >= nx:
            continue
        for b in range(2):
            jy = iy + b
            if jy < 0 or jy >= ny:
                continue
            for e in range(2):
                jz = iz + e
                if jz < 0 or jz >= nz:
                    continue
                w = (tx if a else 1.0 - tx) * (ty if b else 1.0 - ty) * (tz if e else 1.0 - tz)
                acc += w * mu[jx, jy, jz]
    return acc


def integrate_rays(mu, spacing, origins, direction, double step, int n_steps):
    cdef double[:, :, ::1] m = np.ascontiguousarray(mu, dtype=np.float64)
    cdef double[:, :, ::1] o = np.ascontiguousarray(origins, dtype=np.float64)
    cdef double[::1] d = np.ascontiguousarray(direction, dtype=np.float64)
    cdef double[::1] sp = np.ascontiguousarray(spacing, dtype=np.float64)
    cdef Py_ssize_t rows = o.shape[0], cols = o.shape[1]
    out_arr = np.zeros((rows, cols), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t r, c
    cdef int k
    cdef double t, acc, px, py, pz
    cdef double ix = 1.0 / sp[0], iy = 1.0 / sp[1], iz = 1.0 / sp[2]
    with nogil:
        for r in range(rows):
            for c in range(cols):
                acc = 0.0
                for k in range(n_steps):
                    t = (k + 0.5) * step
                    px = (o[r, c, 0] + d[0] * t) * ix - 0.5
                    py = (o[r, c, 1] + d[1] * t) * iy - 0.5
                    pz = (o[r, c, 2] + d[2] * t) * iz - 0.5
                    acc += _sample(m, px, py, pz)
                out[r, c] = acc * step
    return out_arr
