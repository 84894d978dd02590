# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution and pooling kernels.

Same signatures and array layout as :mod:`tbcnn.kernels._numpy`. Patch
gathering, scatter-add and the depthwise/pooling loops run in C; the dense
channel mixing is handed to BLAS through ``numpy.dot``.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


cdef void _im2col(const double[:, :, :, ::1] x, double[:, ::1] cols,
                  Py_ssize_t kh, Py_ssize_t kw) noexcept nogil:
    # last column of ``cols`` is a constant 1 that carries the bias
    cdef Py_ssize_t B = x.shape[0], D = x.shape[1], T = x.shape[2], C = x.shape[3]
    cdef Py_ssize_t ph = kh // 2, pw = kw // 2
    cdef Py_ssize_t n, i, j, a, b, c, ii, jj, row = 0, col
    for n in range(B):
        for i in range(D):
            for j in range(T):
                col = 0
                for a in range(kh):
                    ii = i + a - ph
                    for b in range(kw):
                        jj = j + b - pw
                        if ii < 0 or ii >= D or jj < 0 or jj >= T:
                            for c in range(C):
                                cols[row, col + c] = 0.0
                        else:
                            for c in range(C):
                                cols[row, col + c] = x[n, ii, jj, c]
                        col += C
                cols[row, col] = 1.0
                row += 1


cdef void _col2im(const double[:, ::1] cols, double[:, :, :, ::1] gx,
                  Py_ssize_t kh, Py_ssize_t kw) noexcept nogil:
    cdef Py_ssize_t B = gx.shape[0], D = gx.shape[1], T = gx.shape[2], C = gx.shape[3]
    cdef Py_ssize_t ph = kh // 2, pw = kw // 2
    cdef Py_ssize_t n, i, j, a, b, c, ii, jj, row = 0, col
    for n in range(B):
        for i in range(D):
            for j in range(T):
                col = 0
                for a in range(kh):
                    ii = i + a - ph
                    for b in range(kw):
                        jj = j + b - pw
                        if 0 <= ii < D and 0 <= jj < T:
                            for c in range(C):
                                gx[n, ii, jj, c] += cols[row, col + c]
                        col += C
                row += 1


def conv2d_forward(x, w, bias):
    """Return the output and the patch matrix, which the backward pass reuses."""
    cdef Py_ssize_t B = x.shape[0], D = x.shape[1], T = x.shape[2], C = x.shape[3]
    cdef Py_ssize_t co = w.shape[0], kh = w.shape[1], kw = w.shape[2]
    cols = np.empty((B * D * T, kh * kw * C + 1))
    _im2col(x, cols, kh, kw)
    wb = np.concatenate([w.reshape(co, -1), bias[:, None]], axis=1)
    out = np.dot(cols, wb.T)
    return out.reshape(B, D, T, co), cols


def conv2d_backward(cols, x_shape, w, gout, bint input_grad=True):
    """Input, weight and bias gradients; ``gx`` is None when ``input_grad`` is false."""
    cdef Py_ssize_t B = x_shape[0], D = x_shape[1], T = x_shape[2], C = x_shape[3]
    cdef Py_ssize_t co = w.shape[0], kh = w.shape[1], kw = w.shape[2]
    g = gout.reshape(-1, co)
    gwb = np.dot(g.T, cols)
    gw = np.ascontiguousarray(gwb[:, :-1]).reshape(w.shape)
    gb = np.ascontiguousarray(gwb[:, -1])
    if not input_grad:
        return None, gw, gb
    gcols = np.dot(g, w.reshape(co, -1))
    gx = np.zeros((B, D, T, C))
    _col2im(gcols, gx, kh, kw)
    return gx, gw, gb


cdef inline void _fma_row(double* out, const double* x, const double* w,
                          Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t k
    for k in range(n):
        out[k] += x[k] * w[k]


def _tiled_kernel(w, Py_ssize_t T):
    # (kh, kw, T*C): per-channel weights repeated along one row of the feature map
    return np.ascontiguousarray(np.tile(np.transpose(w, (1, 2, 0)), (1, 1, T)))


def depthwise_forward(x, w, bias):
    cdef Py_ssize_t B = x.shape[0], D = x.shape[1], T = x.shape[2], C = x.shape[3]
    cdef Py_ssize_t kh = w.shape[1], kw = w.shape[2]
    cdef Py_ssize_t ph = kh // 2, pw = kw // 2
    cdef const double[:, :, ::1] wt = _tiled_kernel(w, T)
    cdef const double[:, :, :, ::1] xv = x
    out_arr = np.empty((B, D, T, C))
    out_arr[...] = bias
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, i, a, b, ii, jlo, jhi
    with nogil:
        for n in range(B):
            for i in range(D):
                for a in range(kh):
                    ii = i + a - ph
                    if ii < 0 or ii >= D:
                        continue
                    for b in range(kw):
                        # output columns j whose source column j + b - pw is inside the map
                        jlo = pw - b if pw > b else 0
                        jhi = T + pw - b if b > pw else T
                        if jhi <= jlo:
                            continue
                        _fma_row(&out[n, i, jlo, 0], &xv[n, ii, jlo + b - pw, 0],
                                 &wt[a, b, jlo * C], (jhi - jlo) * C)
    return out_arr


def depthwise_backward(x, w, gout):
    cdef Py_ssize_t B = x.shape[0], D = x.shape[1], T = x.shape[2], C = x.shape[3]
    cdef Py_ssize_t kh = w.shape[1], kw = w.shape[2]
    cdef Py_ssize_t ph = kh // 2, pw = kw // 2
    cdef const double[:, :, ::1] wt = _tiled_kernel(w, T)
    cdef const double[:, :, :, ::1] xv = x
    cdef const double[:, :, :, ::1] g = gout
    gx_arr = np.zeros((B, D, T, C))
    gwt_arr = np.zeros((kh, kw, T * C))
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef double[:, :, ::1] gwt = gwt_arr
    cdef Py_ssize_t n, i, a, b, ii, jlo, jhi, L
    with nogil:
        for n in range(B):
            for i in range(D):
                for a in range(kh):
                    ii = i + a - ph
                    if ii < 0 or ii >= D:
                        continue
                    for b in range(kw):
                        jlo = pw - b if pw > b else 0
                        jhi = T + pw - b if b > pw else T
                        if jhi <= jlo:
                            continue
                        L = (jhi - jlo) * C
                        _fma_row(&gwt[a, b, jlo * C], &g[n, i, jlo, 0],
                                 &xv[n, ii, jlo + b - pw, 0], L)
                        _fma_row(&gx[n, ii, jlo + b - pw, 0], &g[n, i, jlo, 0],
                                 &wt[a, b, jlo * C], L)
    gw = np.ascontiguousarray(
        np.transpose(gwt_arr.reshape(kh, kw, T, C).sum(axis=2), (2, 0, 1)))
    gb = gout.reshape(-1, C).sum(axis=0)
    return gx_arr, gw, gb


def relu_backward(const double[::1] g, const double[::1] out):
    """Upstream gradient masked by ``out > 0`` (flat arrays)."""
    cdef Py_ssize_t n = g.shape[0], k
    res_arr = np.empty(n)
    cdef double[::1] res = res_arr
    with nogil:
        for k in range(n):
            res[k] = g[k] if out[k] > 0.0 else 0.0
    return res_arr


def maxpool2d_forward(const double[:, :, :, ::1] x, Py_ssize_t pd, Py_ssize_t pt):
    """Return pooled values and, per output cell, the flat input offset of the winner."""
    cdef Py_ssize_t B = x.shape[0], D = x.shape[1], T = x.shape[2], C = x.shape[3]
    cdef Py_ssize_t Do = D // pd, To = T // pt
    out_arr = np.empty((B, Do, To, C))
    win_arr = np.empty((B, Do, To, C), dtype=np.intp)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t[:, :, :, ::1] win = win_arr
    cdef Py_ssize_t n, p, q, c, a, b, i, j, best_i, best_j
    cdef double best, v
    with nogil:
        for n in range(B):
            for p in range(Do):
                for q in range(To):
                    for c in range(C):
                        best_i = p * pd
                        best_j = q * pt
                        best = x[n, best_i, best_j, c]
                        # strict comparison keeps the first maximum in row-major order
                        for a in range(pd):
                            i = p * pd + a
                            for b in range(pt):
                                j = q * pt + b
                                v = x[n, i, j, c]
                                if v > best:
                                    best = v
                                    best_i = i
                                    best_j = j
                        out[n, p, q, c] = best
                        win[n, p, q, c] = ((n * D + best_i) * T + best_j) * C + c
    return out_arr, win_arr


def maxpool2d_backward(gout, winners, x_shape):
    gx = np.zeros(int(np.prod(x_shape)))
    gx[winners.ravel()] = gout.ravel()
    return gx.reshape(x_shape)


# Fused ReLU + squeeze + scale over a (B, P, L, Q) view whose middle axis is
# the attended one. Q == 1 (attention over the channel axis) gets its own
# loop so the innermost loop stays long and branch free.

def relu_squeeze(const double[:, :, :, ::1] z):
    """``h = relu(z)`` and the per-sample mean of ``h`` over P and Q, shape (B, L)."""
    cdef Py_ssize_t B = z.shape[0], P = z.shape[1], L = z.shape[2], Q = z.shape[3]
    h_arr = np.empty((B, P, L, Q))
    d_arr = np.zeros((B, L))
    cdef double[:, :, :, ::1] h = h_arr
    cdef double[:, ::1] d = d_arr
    cdef Py_ssize_t n, p, l, q
    cdef double v, acc
    cdef double inv = 1.0 / (P * Q)
    with nogil:
        for n in range(B):
            for p in range(P):
                if Q == 1:
                    for l in range(L):
                        v = z[n, p, l, 0]
                        v = v if v > 0.0 else 0.0
                        h[n, p, l, 0] = v
                        d[n, l] += v
                    continue
                for l in range(L):
                    acc = 0.0
                    for q in range(Q):
                        v = z[n, p, l, q]
                        v = v if v > 0.0 else 0.0
                        h[n, p, l, q] = v
                        acc = acc + v
                    d[n, l] += acc
            for l in range(L):
                d[n, l] *= inv
    return h_arr, d_arr


def scale_grad(const double[:, :, :, ::1] g, const double[:, :, :, ::1] h):
    """Per-sample sum of ``g * h`` over P and Q, shape (B, L)."""
    cdef Py_ssize_t B = g.shape[0], P = g.shape[1], L = g.shape[2], Q = g.shape[3]
    ga_arr = np.zeros((B, L))
    cdef double[:, ::1] ga = ga_arr
    cdef Py_ssize_t n, p, l, q
    cdef double acc
    with nogil:
        for n in range(B):
            for p in range(P):
                if Q == 1:
                    for l in range(L):
                        ga[n, l] += g[n, p, l, 0] * h[n, p, l, 0]
                    continue
                for l in range(L):
                    acc = 0.0
                    for q in range(Q):
                        acc = acc + g[n, p, l, q] * h[n, p, l, q]
                    ga[n, l] += acc
    return ga_arr


def relu_squeeze_scale_grad(const double[:, :, :, ::1] g, const double[:, :, :, ::1] h,
                            const double[:, ::1] a, const double[:, ::1] gd):
    """Gradient at the ReLU input: ``(h > 0) * (g * a + gd / (P * Q))``."""
    cdef Py_ssize_t B = g.shape[0], P = g.shape[1], L = g.shape[2], Q = g.shape[3]
    gz_arr = np.empty((B, P, L, Q))
    cdef double[:, :, :, ::1] gz = gz_arr
    cdef double[:, ::1] scaled = np.empty((B, L))
    cdef Py_ssize_t n, p, l, q
    cdef double al, dl
    cdef double inv = 1.0 / (P * Q)
    cdef const double *gp
    cdef const double *hp
    cdef const double *ap
    cdef const double *dp
    cdef double *op
    with nogil:
        for n in range(B):
            for l in range(L):
                scaled[n, l] = gd[n, l] * inv
            ap = &a[n, 0]
            dp = &scaled[n, 0]
            for p in range(P):
                # arithmetic and masking in separate loops: fused into one, gcc
                # emits a data-dependent path that runs about 8x slower on ReLU masks
                if Q == 1:
                    gp = &g[n, p, 0, 0]
                    hp = &h[n, p, 0, 0]
                    op = &gz[n, p, 0, 0]
                    for l in range(L):
                        op[l] = gp[l] * ap[l] + dp[l]
                    for l in range(L):
                        op[l] = op[l] if hp[l] > 0.0 else 0.0
                    continue
                for l in range(L):
                    al = ap[l]
                    dl = dp[l]
                    gp = &g[n, p, l, 0]
                    hp = &h[n, p, l, 0]
                    op = &gz[n, p, l, 0]
                    for q in range(Q):
                        op[q] = gp[q] * al + dl
                    for q in range(Q):
                        op[q] = op[q] if hp[q] > 0.0 else 0.0
    return gz_arr


def adam_update(double[::1] p, const double[::1] g, double[::1] m, double[::1] v,
                double lr, double beta1, double beta2, double eps, long t):
    """Bias-corrected Adam step on flat arrays, updating ``p``, ``m``, ``v`` in place."""
    cdef Py_ssize_t n = p.shape[0], k
    cdef double c1 = 1.0 - beta1 ** t, c2 = 1.0 - beta2 ** t
    cdef double mk, vk
    with nogil:
        for k in range(n):
            mk = beta1 * m[k] + (1.0 - beta1) * g[k]
            vk = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k]
            m[k] = mk
            v[k] = vk
            p[k] = p[k] - lr * (mk / c1) / (sqrt(vk / c2) + eps)
