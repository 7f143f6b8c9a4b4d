# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled Gaussian-mixture posterior kernel.

Same contract as ``_gm_python.gm_posterior``; one fused pass per sample,
GIL released so threaded callers run concurrently.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, INFINITY

cnp.import_array()

cdef double LOG_2PI = 1.8378770664093453


def gm_posterior(const double[:, ::1] z, const double[:, ::1] means,
                 const double[:, ::1] log_w, const double[::1] scales2,
                 double alpha, double sigma):
    cdef Py_ssize_t B = z.shape[0], d = z.shape[1], K = means.shape[0]
    cdef Py_ssize_t b, k, j
    logp_arr = np.empty(B)
    score_arr = np.zeros((B, d))
    den_arr = np.zeros((B, d))
    resp_arr = np.empty((B, K))
    var_arr = np.empty(K)
    cdef double[::1] logp = logp_arr
    cdef double[:, ::1] score = score_arr
    cdef double[:, ::1] den = den_arr
    cdef double[:, ::1] resp = resp_arr
    cdef double[::1] var = var_arr
    cdef double shift, total, sq, diff, r, gain, inv, lv

    for k in range(K):
        var[k] = alpha * alpha * scales2[k] + sigma * sigma

    with nogil:
        for b in range(B):
            shift = -INFINITY
            for k in range(K):
                if var[k] > 0.0:
                    sq = 0.0
                    for j in range(d):
                        diff = z[b, j] - alpha * means[k, j]
                        sq = sq + diff * diff
                    lv = log_w[b, k] - 0.5 * sq / var[k] - 0.5 * d * (LOG_2PI + log(var[k]))
                else:
                    lv = -INFINITY
                resp[b, k] = lv
                if lv > shift:
                    shift = lv
            total = 0.0
            for k in range(K):
                resp[b, k] = exp(resp[b, k] - shift)
                total = total + resp[b, k]
            logp[b] = shift + log(total)
            for k in range(K):
                r = resp[b, k] / total
                resp[b, k] = r
                if var[k] > 0.0:
                    inv = 1.0 / var[k]
                    gain = alpha * scales2[k] * inv
                    for j in range(d):
                        diff = z[b, j] - alpha * means[k, j]
                        score[b, j] = score[b, j] - r * (diff * inv)
                        den[b, j] = den[b, j] + r * (means[k, j] + gain * diff)
    return logp_arr, score_arr, den_arr, resp_arr
