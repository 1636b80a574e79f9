# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False, language_level=3
"""Compiled backend: one (parameter vector, task) pair per loop iteration,
OpenMP-parallel over pairs.  Same contract as the numpy backend."""

import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange, parallel
from libc.math cimport exp, expm1, log, sqrt, nextafter, isinf
from libc.stdlib cimport malloc, free
from libc.string cimport memcpy, memset

cnp.import_array()


cdef struct Net:
    int L
    int D
    int act
    int* widths     # L + 1 entries
    int* woff       # offset of W_i (out x in, row-major) in theta
    int* boff       # offset of b_i, or -1 when the model has no bias
    int* xoff       # offset of layer input/output i in the activation buffer
    int* aoff       # offset of pre-activation i
    int xsize
    int asize
    int maxw


cdef inline double elu(double a) noexcept nogil:
    return a if a > 0 else expm1(a)


cdef inline double elu_grad(double a) noexcept nogil:
    return 1.0 if a > 0 else exp(a)


cdef double sample_step(Net* net, const double* theta, const double* x, long y,
                        double weight, double width, double* gacc, int want_grad,
                        double* xs, double* pre, double* g, double* g2, int* hit) noexcept nogil:
    """Cross-entropy of one sample; adds weight * dCE/dtheta / width to gacc."""
    cdef int L = net.L, i, o, j, n_in, n_out, k, best
    cdef const double* W
    cdef double s, top, tot, ce
    memcpy(xs, x, net.widths[0] * sizeof(double))
    for i in range(L):
        n_in = net.widths[i]
        n_out = net.widths[i + 1]
        W = theta + net.woff[i]
        for o in range(n_out):
            s = 0.0
            for j in range(n_in):
                s = s + W[o * n_in + j] * xs[net.xoff[i] + j]
            if net.boff[i] >= 0:
                s = s + theta[net.boff[i] + o]
            pre[net.aoff[i] + o] = s
            xs[net.xoff[i + 1] + o] = elu(s) if net.act else s
    k = net.widths[L]
    cdef double* u = xs + net.xoff[L]
    top = u[0]
    best = 0
    for o in range(1, k):
        if u[o] > top:
            top = u[o]
            best = o
    hit[0] = 1 if best == y else 0
    tot = 0.0
    for o in range(k):
        g[o] = exp(u[o] - top)
        tot = tot + g[o]
    ce = top + log(tot) - u[y]
    if not want_grad:
        return ce
    for o in range(k):
        g[o] = g[o] / tot
    g[y] = g[y] - 1.0
    for o in range(k):
        g[o] = g[o] * weight / width
    cdef double* tmp
    for i in range(L - 1, -1, -1):
        n_in = net.widths[i]
        n_out = net.widths[i + 1]
        W = theta + net.woff[i]
        if net.act:
            for o in range(n_out):
                g[o] = g[o] * elu_grad(pre[net.aoff[i] + o])
        for o in range(n_out):
            for j in range(n_in):
                gacc[net.woff[i] + o * n_in + j] += g[o] * xs[net.xoff[i] + j]
            if net.boff[i] >= 0:
                gacc[net.boff[i] + o] += g[o]
        if i > 0:
            for j in range(n_in):
                s = 0.0
                for o in range(n_out):
                    s = s + W[o * n_in + j] * g[o]
                g2[j] = s
            tmp = g
            g = g2
            g2 = tmp
    return ce


cdef void project(double* theta, int D, double radius) noexcept nogil:
    cdef double nrm = 0.0, scale
    cdef int i
    if isinf(radius):
        return
    for i in range(D):
        nrm = nrm + theta[i] * theta[i]
    nrm = sqrt(nrm)
    if nrm <= radius:
        return
    scale = radius / nrm
    for i in range(D):
        theta[i] = theta[i] * scale
    while True:
        nrm = 0.0
        for i in range(D):
            nrm = nrm + theta[i] * theta[i]
        if sqrt(nrm) <= radius:
            break
        for i in range(D):
            theta[i] = nextafter(theta[i], 0.0)


cdef void run_pair(Net* net, const double* theta0, long t,
                   const double* Xtr, const long* Ytr, int m,
                   const double* Xev, const long* Yev, int q,
                   const long* step_index, const double* lrs, int T,
                   double radius, double m_f, double M_f, int want_grad,
                   double* theta, double* gacc, double* xs, double* pre,
                   double* g, double* g2,
                   double* loss_out, double* acc_out, double* grad_out) noexcept nogil:
    cdef int D = net.D, d = net.widths[0], s, j, i, hits = 0, hit = 0
    cdef long idx
    cdef double width = M_f - m_f, ce = 0.0
    memcpy(theta, theta0, D * sizeof(double))
    for s in range(T):
        memset(gacc, 0, D * sizeof(double))
        idx = step_index[t * T + s]
        if idx < 0:
            for j in range(m):
                sample_step(net, theta, Xtr + (t * m + j) * d, Ytr[t * m + j],
                            1.0 / m, width, gacc, 1, xs, pre, g, g2, &hit)
        else:
            sample_step(net, theta, Xtr + (t * m + idx) * d, Ytr[t * m + idx],
                        1.0, width, gacc, 1, xs, pre, g, g2, &hit)
        for i in range(D):
            theta[i] = theta[i] - lrs[s] * gacc[i]
        project(theta, D, radius)
    if want_grad:
        memset(gacc, 0, D * sizeof(double))
    for j in range(q):
        ce = ce + (sample_step(net, theta, Xev + (t * q + j) * d, Yev[t * q + j],
                               1.0 / q, width, gacc, want_grad, xs, pre, g, g2, &hit) - m_f) / width
        hits = hits + hit
    loss_out[0] = ce / q
    acc_out[0] = (<double>hits) / q
    if want_grad:
        memcpy(grad_out, gacc, D * sizeof(double))


def adapt_eval(thetas, theta_idx, task_idx, Xtr, Ytr, Xev, Yev, widths, bias, act,
               step_index, lrs, radius, m_f, M_f, want_grad=False, nthreads=1, return_adapted=False):
    cdef double[:, ::1] th = np.ascontiguousarray(thetas, dtype=np.float64)
    cdef long[::1] ti = np.ascontiguousarray(theta_idx, dtype=np.int64)
    cdef long[::1] ki = np.ascontiguousarray(task_idx, dtype=np.int64)
    cdef double[:, :, ::1] xtr = np.ascontiguousarray(Xtr, dtype=np.float64)
    cdef long[:, ::1] ytr = np.ascontiguousarray(Ytr, dtype=np.int64)
    cdef double[:, :, ::1] xev = np.ascontiguousarray(Xev, dtype=np.float64)
    cdef long[:, ::1] yev = np.ascontiguousarray(Yev, dtype=np.int64)
    cdef long[:, ::1] steps = np.ascontiguousarray(step_index, dtype=np.int64)
    cdef double[::1] lr = np.ascontiguousarray(lrs, dtype=np.float64)
    cdef int[::1] w = np.ascontiguousarray(widths, dtype=np.intc)

    if bool(bias) != bool(act):
        raise ValueError("backends support linear (no bias, no activation) or ELU-MLP with biases")
    cdef int L = w.shape[0] - 1, i, off = 0, xo = 0, ao = 0, maxw = 0
    cdef Net net
    cdef int[::1] woff = np.zeros(L, dtype=np.intc)
    cdef int[::1] boff = np.zeros(L, dtype=np.intc)
    cdef int[::1] xoff = np.zeros(L + 1, dtype=np.intc)
    cdef int[::1] aoff = np.zeros(L, dtype=np.intc)
    for i in range(L):
        woff[i] = off
        off += w[i] * w[i + 1]
        if bias:
            boff[i] = off
            off += w[i + 1]
        else:
            boff[i] = -1
        xoff[i] = xo
        xo += w[i]
        aoff[i] = ao
        ao += w[i + 1]
    xoff[L] = xo
    xo += w[L]
    for i in range(L + 1):
        maxw = max(maxw, w[i])
    if th.shape[1] != off:
        raise ValueError(f"parameter vectors have {th.shape[1]} entries, layout needs {off}")
    net.L = L
    net.D = off
    net.act = 1 if act else 0
    net.widths = &w[0]
    net.woff = &woff[0]
    net.boff = &boff[0]
    net.xoff = &xoff[0]
    net.aoff = &aoff[0]
    net.xsize = xo
    net.asize = ao
    net.maxw = maxw

    cdef long B = ti.shape[0], p
    cdef int D = off, T = lr.shape[0], m = xtr.shape[1], q = xev.shape[1]
    if steps.shape[1] != T:
        raise ValueError("step_index and lrs disagree on the step count")
    loss = np.empty(B)
    acc = np.empty(B)
    grad = np.empty((B, D)) if want_grad else np.empty((1, D))
    adapted = np.empty((B, D)) if return_adapted else np.empty((1, D))
    cdef double[::1] lo = loss
    cdef double[::1] ac = acc
    cdef double[:, ::1] gr = grad
    cdef double[:, ::1] ad = adapted
    cdef double rad = radius, mf = m_f, Mf = M_f
    cdef int wg = 1 if want_grad else 0, ra = 1 if return_adapted else 0
    cdef int nt = max(1, int(nthreads))
    cdef double* buf
    cdef double* gsink
    if B == 0:
        return loss, acc, (grad if want_grad else None)
    cdef const double* xtr_p = &xtr[0, 0, 0] if xtr.shape[0] * m > 0 else NULL
    cdef const long* ytr_p = &ytr[0, 0] if ytr.shape[0] * m > 0 else NULL
    cdef const long* steps_p = &steps[0, 0] if steps.shape[0] * T > 0 else NULL
    cdef const double* lr_p = &lr[0] if T > 0 else NULL

    with nogil, parallel(num_threads=nt):
        buf = <double*> malloc((3 * D + xo + ao + 2 * maxw) * sizeof(double))
        for p in prange(B, schedule="static"):
            run_pair(&net, &th[ti[p], 0], ki[p], xtr_p, ytr_p, m,
                     &xev[0, 0, 0], &yev[0, 0], q, steps_p, lr_p, T,
                     rad, mf, Mf, wg,
                     buf, buf + D, buf + 2 * D, buf + 2 * D + xo,
                     buf + 2 * D + xo + ao, buf + 2 * D + xo + ao + maxw,
                     &lo[p], &ac[p], &gr[p, 0] if wg else buf + 2 * D)
            if ra:
                memcpy(&ad[p, 0], buf, D * sizeof(double))
        free(buf)
    if return_adapted:
        return loss, acc, (grad if want_grad else None), adapted
    return loss, acc, (grad if want_grad else None)
