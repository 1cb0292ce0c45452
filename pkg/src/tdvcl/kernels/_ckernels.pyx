# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-parameter kernels. Same contracts as ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, log1p, sqrt, pow

cnp.import_array()


cdef inline double _softplus(double x) nogil:
    if x > 0.0:
        return x + log1p(exp(-x))
    return log1p(exp(x))


cdef inline double _sigmoid(double x) nogil:
    cdef double z
    if x >= 0.0:
        return 1.0 / (1.0 + exp(-x))
    z = exp(x)
    return z / (1.0 + z)


def softplus(x):
    cdef cnp.ndarray[double, ndim=1] flat = np.ascontiguousarray(x, dtype=np.float64).ravel()
    cdef cnp.ndarray[double, ndim=1] out = np.empty_like(flat)
    cdef const double[::1] xv = flat
    cdef double[::1] ov = out
    cdef Py_ssize_t i, n = flat.shape[0]
    with nogil:
        for i in range(n):
            ov[i] = _softplus(xv[i])
    return out.reshape(np.shape(x))


def sigmoid(x):
    cdef cnp.ndarray[double, ndim=1] flat = np.ascontiguousarray(x, dtype=np.float64).ravel()
    cdef cnp.ndarray[double, ndim=1] out = np.empty_like(flat)
    cdef const double[::1] xv = flat
    cdef double[::1] ov = out
    cdef Py_ssize_t i, n = flat.shape[0]
    with nogil:
        for i in range(n):
            ov[i] = _sigmoid(xv[i])
    return out.reshape(np.shape(x))


def kl_diag(mu_q, sig_q, mu_p, sig_p):
    cdef const double[::1] mq = np.ascontiguousarray(mu_q, dtype=np.float64).ravel()
    cdef const double[::1] sq = np.ascontiguousarray(sig_q, dtype=np.float64).ravel()
    cdef const double[::1] mp = np.ascontiguousarray(np.broadcast_to(mu_p, np.shape(mu_q)), dtype=np.float64).ravel()
    cdef const double[::1] sp = np.ascontiguousarray(np.broadcast_to(sig_p, np.shape(mu_q)), dtype=np.float64).ravel()
    cdef Py_ssize_t i, n = mq.shape[0]
    cdef double acc = 0.0, d, vp
    with nogil:
        for i in range(n):
            vp = sp[i] * sp[i]
            d = mq[i] - mp[i]
            acc += log(sp[i]) - log(sq[i]) + (sq[i] * sq[i] + d * d) / (2.0 * vp) - 0.5
    return acc


def kl_diag_grad(mu_q, rho_q, mu_p, sig_p):
    cdef const double[::1] mq = np.ascontiguousarray(mu_q, dtype=np.float64).ravel()
    cdef const double[::1] rq = np.ascontiguousarray(rho_q, dtype=np.float64).ravel()
    cdef const double[::1] mp = np.ascontiguousarray(np.broadcast_to(mu_p, np.shape(mu_q)), dtype=np.float64).ravel()
    cdef const double[::1] sp = np.ascontiguousarray(np.broadcast_to(sig_p, np.shape(mu_q)), dtype=np.float64).ravel()
    cdef Py_ssize_t i, n = mq.shape[0]
    g_mu_arr = np.empty(n, dtype=np.float64)
    g_rho_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] gm = g_mu_arr
    cdef double[::1] gr = g_rho_arr
    cdef double acc = 0.0, d, vp, s
    with nogil:
        for i in range(n):
            s = _softplus(rq[i])
            vp = sp[i] * sp[i]
            d = mq[i] - mp[i]
            acc += log(sp[i]) - log(s) + (s * s + d * d) / (2.0 * vp) - 0.5
            gm[i] = d / vp
            gr[i] = (s / vp - 1.0 / s) * _sigmoid(rq[i])
    shape = np.shape(mu_q)
    return acc, g_mu_arr.reshape(shape), g_rho_arr.reshape(shape)


def adam_update(double[::1] params, const double[::1] grads, double[::1] m, double[::1] v,
                double lr, double beta1, double beta2, double eps, long step):
    cdef Py_ssize_t i, n = params.shape[0]
    cdef double c1 = 1.0 - pow(beta1, step)
    cdef double c2 = 1.0 - pow(beta2, step)
    cdef double g
    with nogil:
        for i in range(n):
            g = grads[i]
            m[i] = beta1 * m[i] + (1.0 - beta1) * g
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g
            params[i] -= lr * (m[i] / c1) / (sqrt(v[i] / c2) + eps)
