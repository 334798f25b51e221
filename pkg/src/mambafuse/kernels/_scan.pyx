# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled selective-scan recurrence (forward and adjoint).

Same contract as mambafuse.kernels.scan_numpy; the sequential time loop
runs in C instead of python, which is the part numpy cannot vectorize.
"""

import numpy as np

cimport cython

ctypedef fused real:
    float
    double


def scan_forward(real[:, :, :, ::1] a, real[:, :, :, ::1] bx, real[:, :, ::1] c):
    cdef Py_ssize_t n = a.shape[0], length = a.shape[1], d = a.shape[2], s = a.shape[3]
    dtype = np.float32 if real is float else np.float64
    h_arr = np.empty((n, length, d, s), dtype=dtype)
    y_arr = np.zeros((n, length, d), dtype=dtype)
    cdef real[:, :, :, ::1] h = h_arr
    cdef real[:, :, ::1] y = y_arr
    cdef Py_ssize_t i, k, j, t
    cdef real acc, hv
    with nogil:
        for i in range(n):
            for k in range(length):
                for j in range(d):
                    acc = 0
                    for t in range(s):
                        if k == 0:
                            hv = bx[i, k, j, t]
                        else:
                            hv = a[i, k, j, t] * h[i, k - 1, j, t] + bx[i, k, j, t]
                        h[i, k, j, t] = hv
                        acc += c[i, k, t] * hv
                    y[i, k, j] = acc
    return y_arr, h_arr


def scan_backward(real[:, :, :, ::1] a, real[:, :, ::1] c,
                  real[:, :, :, ::1] h, real[:, :, ::1] dy):
    cdef Py_ssize_t n = a.shape[0], length = a.shape[1], d = a.shape[2], s = a.shape[3]
    dtype = np.float32 if real is float else np.float64
    da_arr = np.zeros((n, length, d, s), dtype=dtype)
    dbx_arr = np.empty((n, length, d, s), dtype=dtype)
    dc_arr = np.zeros((n, length, s), dtype=dtype)
    lam_arr = np.zeros((d, s), dtype=dtype)
    cdef real[:, :, :, ::1] da = da_arr
    cdef real[:, :, :, ::1] dbx = dbx_arr
    cdef real[:, :, ::1] dc = dc_arr
    cdef real[:, ::1] lam = lam_arr
    cdef Py_ssize_t i, k, j, t
    cdef real lv, g
    with nogil:
        for i in range(n):
            for j in range(d):
                for t in range(s):
                    lam[j, t] = 0
            for k in range(length - 1, -1, -1):
                for j in range(d):
                    g = dy[i, k, j]
                    for t in range(s):
                        dc[i, k, t] += g * h[i, k, j, t]
                        lv = g * c[i, k, t] + lam[j, t]
                        dbx[i, k, j, t] = lv
                        if k > 0:
                            da[i, k, j, t] = lv * h[i, k - 1, j, t]
                        lam[j, t] = a[i, k, j, t] * lv
    return da_arr, dbx_arr, dc_arr
