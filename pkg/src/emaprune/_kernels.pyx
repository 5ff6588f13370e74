# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled MLP kernels: forward, loss and reverse-mode gradient.

Mirrors ``_kernels_py`` exactly in signature and parameter layout. Batch-level
work (forward pass, batch-mean backprop) goes through BLAS ``dgemm`` one layer
at a time; per-sample gradients use a fused loop per row so no
``B x out x in`` temporaries are built.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

BACKEND = "cython"


cdef struct Net:
    int n_layers
    int n_params
    int n_units


cdef void _layout(long[::1] sizes, long[::1] w_off, long[::1] b_off,
                  long[::1] u_off, Net* net) noexcept nogil:
    cdef int L = sizes.shape[0] - 1
    cdef int l
    cdef long off = 0
    cdef long uoff = 0
    for l in range(L):
        w_off[l] = off
        off += sizes[l] * sizes[l + 1]
        b_off[l] = off
        off += sizes[l + 1]
    for l in range(L + 1):
        u_off[l] = uoff
        uoff += sizes[l]
    net.n_layers = L
    net.n_params = off
    net.n_units = uoff


cdef double _loss_delta_row(double* z, long n_out, double target, int task,
                           double* delta) noexcept nogil:
    cdef long o, cls
    cdef double m, s, e, err
    if task == 0:
        cls = <long>target
        m = z[0]
        for o in range(1, n_out):
            if z[o] > m:
                m = z[o]
        s = 0.0
        for o in range(n_out):
            e = exp(z[o] - m)
            delta[o] = e
            s += e
        for o in range(n_out):
            delta[o] = delta[o] / s
        delta[cls] -= 1.0
        return m + log(s) - z[cls]
    err = z[0] - target
    delta[0] = 2.0 * err
    return err * err


cdef void _backward_one(const double[::1] p, long[::1] sizes, long[::1] w_off,
                        long[::1] b_off, long[::1] u_off, int L, int act,
                        const double[::1] a, double[::1] delta, double[::1] back,
                        double[::1] g) noexcept nogil:
    cdef long l, o, i, n_in, n_out, wo, bo, ui
    cdef double d, s, ai
    for l in range(L - 1, -1, -1):
        n_in = sizes[l]
        n_out = sizes[l + 1]
        wo = w_off[l]
        bo = b_off[l]
        ui = u_off[l]
        for o in range(n_out):
            d = delta[o]
            g[bo + o] = d
            for i in range(n_in):
                g[wo + o * n_in + i] = d * a[ui + i]
        if l > 0:
            for i in range(n_in):
                s = 0.0
                for o in range(n_out):
                    s += p[wo + o * n_in + i] * delta[o]
                ai = a[ui + i]
                if act == 0:
                    back[i] = s * (1.0 - ai * ai)
                elif ai > 0.0:
                    back[i] = s
                else:
                    back[i] = 0.0
            for i in range(n_in):
                delta[i] = back[i]


def _prep(params, X, sizes):
    p = np.ascontiguousarray(params, dtype=np.float64)
    Xc = np.ascontiguousarray(X, dtype=np.float64)
    sz = np.ascontiguousarray(sizes, dtype=np.int64).astype(np.dtype("l"), copy=False)
    return p, Xc, sz


cdef void _gemm(char* ta, char* tb, int m, int n, int k, double alpha, double* a, int lda,
                double* b, int ldb, double beta, double* c, int ldc) noexcept nogil:
    dgemm(ta, tb, &m, &n, &k, &alpha, a, &lda, b, &ldb, &beta, c, &ldc)


cdef void _dense(double* W, double* bias, double* A, double* Z, int B, int n_in,
                 int n_out) noexcept nogil:
    # Z (B x n_out, row-major) = A W^T + bias.
    # In column-major terms: Z^T = W^T' A^T with W^T stored as (n_in x n_out).
    cdef Py_ssize_t r, o
    for r in range(B):
        for o in range(n_out):
            Z[r * n_out + o] = bias[o]
    _gemm(b"T", b"N", n_out, B, n_in, 1.0, W, n_in, A, n_in, 1.0, Z, n_out)


def _batch_forward(double[::1] p, double[:, ::1] X, long[::1] sz, int act):
    """Activations of every layer for the whole batch (list of B x width arrays)."""
    cdef int L = sz.shape[0] - 1
    cdef int B = X.shape[0], l, n_in, n_out
    cdef long off = 0
    acts = [np.asarray(X)]
    cdef double[:, ::1] A, Z
    for l in range(L):
        n_in = sz[l]
        n_out = sz[l + 1]
        Zarr = np.empty((B, n_out), dtype=np.float64)
        A = acts[l]
        Z = Zarr
        if B > 0:
            with nogil:
                _dense(&p[off], &p[off + n_in * n_out], &A[0, 0], &Z[0, 0], B, n_in, n_out)
        if l < L - 1:
            # numpy's vectorised tanh is several times faster than libm's per call
            if act == 0:
                np.tanh(Zarr, out=Zarr)
            else:
                np.maximum(Zarr, 0.0, out=Zarr)
        off += n_in * n_out + n_out
        acts.append(Zarr)
    return acts


def forward_logits(params, X, sizes, int act):
    p_arr, X_arr, sz_arr = _prep(params, X, sizes)
    return _batch_forward(p_arr, X_arr, sz_arr, act).pop()


def sample_grads(params, X, y, sizes, int task, int act):
    """Per-sample losses (B,) and gradients (B, P)."""
    p_arr, X_arr, sz_arr = _prep(params, X, sizes)
    cdef double[::1] p = p_arr
    cdef double[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef long[::1] sz = sz_arr
    cdef int L = sz.shape[0] - 1
    cdef Net net
    w_off = np.empty(L, dtype=np.dtype("l"))
    b_off = np.empty(L, dtype=np.dtype("l"))
    u_off = np.empty(L + 1, dtype=np.dtype("l"))
    cdef long[::1] wv = w_off, bv = b_off, uv = u_off
    _layout(sz, wv, bv, uv, &net)
    cdef Py_ssize_t B = X_arr.shape[0], r
    cdef long width = 0, l
    for l in range(L + 1):
        if sz[l] > width:
            width = sz[l]
    loss = np.empty(B, dtype=np.float64)
    grads = np.empty((B, net.n_params), dtype=np.float64)
    if B == 0:
        return loss, grads
    # every layer's activations side by side, one row per sample
    cdef double[:, ::1] acts = np.concatenate(_batch_forward(p, X_arr, sz, act), axis=1)
    cdef double[::1] lv = loss
    cdef double[:, ::1] gv = grads
    cdef double[::1] delta = np.empty(width, dtype=np.float64)
    cdef double[::1] back = np.empty(width, dtype=np.float64)
    with nogil:
        for r in range(B):
            lv[r] = _loss_delta_row(&acts[r, uv[L]], sz[L], yv[r], task, &delta[0])
            _backward_one(p, sz, wv, bv, uv, L, act, acts[r], delta, back, gv[r])
    return loss, grads


def mean_grad(params, X, y, sizes, int task, int act):
    """Per-sample losses (B,) and the batch-mean gradient (P,)."""
    p_arr, X_arr, sz_arr = _prep(params, X, sizes)
    cdef double[::1] p = p_arr
    cdef double[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef long[::1] sz = sz_arr
    cdef int L = sz.shape[0] - 1
    cdef int B = X_arr.shape[0], l, n_in, n_out, r, o, i
    cdef long n_params = 0
    for l in range(L):
        n_params += sz[l] * sz[l + 1] + sz[l + 1]
    loss = np.empty(B, dtype=np.float64)
    total = np.zeros(n_params, dtype=np.float64)
    if B == 0:
        return loss, total
    acts = _batch_forward(p, X_arr, sz, act)
    cdef double[::1] lv = loss
    cdef double[::1] tv = total
    cdef double[:, ::1] out = acts[L]
    cdef double[:, ::1] A
    cdef double[:, ::1] D = np.empty((B, sz[L]), dtype=np.float64)
    cdef double[:, ::1] P
    cdef double inv = 1.0 / B, s, ai
    cdef long wo, bo
    with nogil:
        for r in range(B):
            lv[r] = _loss_delta_row(&out[r, 0], sz[L], yv[r], task, &D[r, 0])
    # offsets of the last layer
    wo = n_params
    for l in range(L - 1, -1, -1):
        n_in = sz[l]
        n_out = sz[l + 1]
        bo = wo - n_out
        wo = bo - n_in * n_out
        A = acts[l]
        with nogil:
            # grad W (n_out x n_in row-major) = D^T A / B
            _gemm(b"N", b"T", n_in, n_out, B, inv, &A[0, 0], n_in, &D[0, 0], n_out, 0.0,
                  &tv[wo], n_in)
            for r in range(B):
                for o in range(n_out):
                    tv[bo + o] += D[r, o]
            for o in range(n_out):
                tv[bo + o] *= inv
        if l > 0:
            P = np.empty((B, n_in), dtype=np.float64)
            with nogil:
                # P (B x n_in) = D W, then the activation derivative
                _gemm(b"N", b"N", n_in, B, n_out, 1.0, &p[wo], n_in, &D[0, 0], n_out, 0.0,
                      &P[0, 0], n_in)
                for r in range(B):
                    for i in range(n_in):
                        ai = A[r, i]
                        if act == 0:
                            P[r, i] = P[r, i] * (1.0 - ai * ai)
                        elif not ai > 0.0:
                            P[r, i] = 0.0
            D = P
    return loss, total
