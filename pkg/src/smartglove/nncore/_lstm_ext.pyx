# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled LSTM recurrence (one direction, time-major, batched).

Mirrors ``_lstm_py`` in algorithm.  Per-step matrix products go through BLAS;
gate nonlinearities run as contiguous C loops without the GIL so the compiler
can vectorise them.
"""
import numpy as np

from cython cimport floating
from libc.math cimport exp, tanhf
from libc.string cimport memcpy
from scipy.linalg.cython_blas cimport dgemm, sgemm


cdef inline void _gemm_rm(floating* a, floating* b, floating* c,
                          int m, int n, int k, floating beta,
                          bint trans_a, bint trans_b) noexcept nogil:
    # Row-major C[m,n] = op(A)[m,k] @ op(B)[k,n] + beta * C, expressed as the
    # column-major product C^T = op(B)^T @ op(A)^T.
    cdef char ta = b'T' if trans_b else b'N'
    cdef char tb = b'T' if trans_a else b'N'
    cdef int lda = k if trans_b else n
    cdef int ldb = m if trans_a else k
    cdef int ldc = n
    cdef floating alpha = 1.0
    if floating is double:
        dgemm(&ta, &tb, &n, &m, &k, &alpha, b, &lda, a, &ldb, &beta, c, &ldc)
    else:
        sgemm(&ta, &tb, &n, &m, &k, &alpha, b, &lda, a, &ldb, &beta, c, &ldc)


cdef inline void _tanh_inplace(floating* x, Py_ssize_t n) noexcept nogil:
    # tanh(v) = 1 - 2 / (exp(2v) + 1); the clamp keeps exp finite (|v| = 20
    # already rounds to +-1 in double precision).
    cdef Py_ssize_t i
    cdef floating v
    if floating is double:
        for i in range(n):
            v = x[i]
            v = 20.0 if v > 20.0 else (-20.0 if v < -20.0 else v)
            x[i] = 1.0 - 2.0 / (exp(2.0 * v) + 1.0)
    else:
        for i in range(n):
            x[i] = tanhf(x[i])


cdef inline void _sigmoid_inplace(floating* x, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(n):
        x[i] = 0.5 * x[i]
    _tanh_inplace(x, n)
    for i in range(n):
        x[i] = 0.5 * (1.0 + x[i])


cdef void _cell_forward(floating* z, floating* c_prev, floating* c, floating* h,
                        floating* work, Py_ssize_t B, Py_ssize_t H) noexcept nogil:
    # z: (B, 4H) pre-activations, overwritten with activations.
    cdef Py_ssize_t b, j
    cdef Py_ssize_t G = 4 * H
    cdef floating* zr
    cdef floating* cr
    cdef floating* hr
    for b in range(B):
        zr = z + b * G
        _sigmoid_inplace(zr, 2 * H)
        _tanh_inplace(zr + 2 * H, H)
        _sigmoid_inplace(zr + 3 * H, H)
    for b in range(B):
        zr = z + b * G
        cr = c + b * H
        hr = h + b * H
        if c_prev != NULL:
            for j in range(H):
                cr[j] = zr[H + j] * c_prev[b * H + j] + zr[j] * zr[2 * H + j]
        else:
            for j in range(H):
                cr[j] = zr[j] * zr[2 * H + j]
        for j in range(H):
            work[j] = cr[j]
        _tanh_inplace(work, H)
        for j in range(H):
            hr[j] = zr[3 * H + j] * work[j]


def lstm_forward(floating[:, :, ::1] xw, floating[:, ::1] w_h, bint reverse=False):
    """Run the recurrence over precomputed input projections.

    xw : (T, B, 4H) input projections ``x @ W_x + b``
    w_h : (H, 4H) recurrent weights
    Returns (hs, cs, gates) with gates post-activation in i, f, g, o order.
    """
    cdef Py_ssize_t T = xw.shape[0], B = xw.shape[1], G = xw.shape[2]
    cdef Py_ssize_t H = w_h.shape[0]
    if G != 4 * H or w_h.shape[1] != G:
        raise ValueError("shape mismatch between projections and recurrent weights")
    dtype = np.float64 if floating is double else np.float32
    hs_arr = np.zeros((T, B, H), dtype=dtype)
    cs_arr = np.zeros((T, B, H), dtype=dtype)
    gates_arr = np.empty((T, B, G), dtype=dtype)
    work_arr = np.empty(H, dtype=dtype)
    cdef floating[:, :, ::1] hs = hs_arr
    cdef floating[:, :, ::1] cs = cs_arr
    cdef floating[:, :, ::1] gates = gates_arr
    cdef floating[::1] work = work_arr
    cdef Py_ssize_t step, t, tp
    if T == 0 or B == 0 or H == 0:
        return hs_arr, cs_arr, gates_arr
    with nogil:
        for step in range(T):
            t = T - 1 - step if reverse else step
            tp = t + 1 if reverse else t - 1
            memcpy(&gates[t, 0, 0], &xw[t, 0, 0], B * G * sizeof(floating))
            if step > 0:
                _gemm_rm(&hs[tp, 0, 0], &w_h[0, 0], &gates[t, 0, 0],
                         <int>B, <int>G, <int>H, 1.0, False, False)
                _cell_forward(&gates[t, 0, 0], &cs[tp, 0, 0], &cs[t, 0, 0],
                              &hs[t, 0, 0], &work[0], B, H)
            else:
                _cell_forward(&gates[t, 0, 0], NULL, &cs[t, 0, 0],
                              &hs[t, 0, 0], &work[0], B, H)
    return hs_arr, cs_arr, gates_arr


cdef void _cell_backward(floating* gate, floating* c, floating* c_prev,
                         floating* dh_out, floating* dh_next, floating* dc_next,
                         floating* dg, floating* work, Py_ssize_t B, Py_ssize_t H) noexcept nogil:
    cdef Py_ssize_t b, j
    cdef Py_ssize_t G = 4 * H
    cdef floating gi, gf, gg, go, tc, cp, dh, dc
    cdef floating* gr
    cdef floating* dgr
    for b in range(B):
        gr = gate + b * G
        dgr = dg + b * G
        for j in range(H):
            work[j] = c[b * H + j]
        _tanh_inplace(work, H)
        for j in range(H):
            gi = gr[j]
            gf = gr[H + j]
            gg = gr[2 * H + j]
            go = gr[3 * H + j]
            tc = work[j]
            cp = c_prev[b * H + j] if c_prev != NULL else 0.0
            dh = dh_out[b * H + j] + dh_next[b * H + j]
            dc = dc_next[b * H + j] + dh * go * (1.0 - tc * tc)
            dgr[j] = dc * gg * gi * (1.0 - gi)
            dgr[H + j] = dc * cp * gf * (1.0 - gf)
            dgr[2 * H + j] = dc * gi * (1.0 - gg * gg)
            dgr[3 * H + j] = dh * tc * go * (1.0 - go)
            dc_next[b * H + j] = dc * gf


def lstm_backward(floating[:, :, ::1] dhs, floating[:, :, ::1] hs,
                  floating[:, :, ::1] cs, floating[:, :, ::1] gates,
                  floating[:, ::1] w_h, bint reverse=False):
    """Backpropagate through the recurrence.

    Returns (dgates, dw_h): gradients w.r.t. the pre-activation gates (T, B, 4H),
    which equal the gradients w.r.t. ``xw``, and w.r.t. the recurrent weights.
    """
    cdef Py_ssize_t T = gates.shape[0], B = gates.shape[1], G = gates.shape[2]
    cdef Py_ssize_t H = w_h.shape[0]
    if G != 4 * H or dhs.shape[0] != T or dhs.shape[1] != B or dhs.shape[2] != H:
        raise ValueError("shape mismatch in lstm_backward")
    dtype = np.float64 if floating is double else np.float32
    dg_arr = np.zeros((T, B, G), dtype=dtype)
    dwh_arr = np.zeros((H, G), dtype=dtype)
    dh_next_arr = np.zeros((B, H), dtype=dtype)
    dc_next_arr = np.zeros((B, H), dtype=dtype)
    work_arr = np.empty(H, dtype=dtype)
    cdef floating[:, :, ::1] dg = dg_arr
    cdef floating[:, ::1] dwh = dwh_arr
    cdef floating[:, ::1] dh_next = dh_next_arr
    cdef floating[:, ::1] dc_next = dc_next_arr
    cdef floating[::1] work = work_arr
    cdef Py_ssize_t step, t, tp
    if T == 0 or B == 0 or H == 0:
        return dg_arr, dwh_arr
    with nogil:
        for step in range(T - 1, -1, -1):
            t = T - 1 - step if reverse else step
            tp = t + 1 if reverse else t - 1
            if step > 0:
                _cell_backward(&gates[t, 0, 0], &cs[t, 0, 0], &cs[tp, 0, 0],
                               &dhs[t, 0, 0], &dh_next[0, 0], &dc_next[0, 0],
                               &dg[t, 0, 0], &work[0], B, H)
                _gemm_rm(&dg[t, 0, 0], &w_h[0, 0], &dh_next[0, 0],
                         <int>B, <int>H, <int>G, 0.0, False, True)
                _gemm_rm(&hs[tp, 0, 0], &dg[t, 0, 0], &dwh[0, 0],
                         <int>H, <int>G, <int>B, 1.0, True, False)
            else:
                _cell_backward(&gates[t, 0, 0], &cs[t, 0, 0], NULL,
                               &dhs[t, 0, 0], &dh_next[0, 0], &dc_next[0, 0],
                               &dg[t, 0, 0], &work[0], B, H)
    return dg_arr, dwh_arr
