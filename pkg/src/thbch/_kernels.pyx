# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels (same signatures as _kernels_py)."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def basis_ders(knots, int p, spans, x, int nders):
    cdef const double[::1] U = np.ascontiguousarray(knots, dtype=np.float64)
    cdef const double[::1] xs = np.ascontiguousarray(x, dtype=np.float64)
    cdef const cnp.intp_t[::1] sp = np.ascontiguousarray(spans, dtype=np.intp)
    cdef Py_ssize_t npts = xs.shape[0]
    out = np.zeros((npts, nders + 1, p + 1))
    cdef double[:, :, ::1] ders = out
    cdef double[:, ::1] ndu = np.zeros((p + 1, p + 1))
    cdef double[:, ::1] a = np.zeros((2, p + 1))
    cdef double[::1] left = np.zeros(p + 1)
    cdef double[::1] right = np.zeros(p + 1)
    cdef Py_ssize_t n, j, r, k, s1, s2, rk, pk, j1, j2, span
    cdef double saved, temp, d, u, fac

    for n in range(npts):
        u = xs[n]
        span = sp[n]
        ndu[0, 0] = 1.0
        for j in range(1, p + 1):
            left[j] = u - U[span + 1 - j]
            right[j] = U[span + j] - u
            saved = 0.0
            for r in range(j):
                ndu[j, r] = right[r + 1] + left[j - r]
                temp = ndu[r, j - 1] / ndu[j, r]
                ndu[r, j] = saved + right[r + 1] * temp
                saved = left[j - r] * temp
            ndu[j, j] = saved
        for j in range(p + 1):
            ders[n, 0, j] = ndu[j, p]
        for r in range(p + 1):
            s1 = 0
            s2 = 1
            for j in range(p + 1):
                a[0, j] = 0.0
                a[1, j] = 0.0
            a[0, 0] = 1.0
            for k in range(1, nders + 1):
                d = 0.0
                rk = r - k
                pk = p - k
                if r >= k:
                    a[s2, 0] = a[s1, 0] / ndu[pk + 1, rk]
                    d = a[s2, 0] * ndu[rk, pk]
                if rk >= -1:
                    j1 = 1
                else:
                    j1 = -rk
                if r - 1 <= pk:
                    j2 = k - 1
                else:
                    j2 = p - r
                for j in range(j1, j2 + 1):
                    a[s2, j] = (a[s1, j] - a[s1, j - 1]) / ndu[pk + 1, rk + j]
                    d += a[s2, j] * ndu[rk + j, pk]
                if r <= pk:
                    a[s2, k] = -a[s1, k - 1] / ndu[pk + 1, r]
                    d += a[s2, k] * ndu[r, pk]
                ders[n, k, r] = d
                s1, s2 = s2, s1
        fac = p
        for k in range(1, nders + 1):
            for j in range(p + 1):
                ders[n, k, j] *= fac
            fac *= p - k
    return out


def nonlinear_local(N, G, w, uloc, double sigma, double nu):
    cdef const double[:, :, ::1] Nv = np.ascontiguousarray(N, dtype=np.float64)
    cdef const double[:, :, :, ::1] Gv = np.ascontiguousarray(G, dtype=np.float64)
    cdef const double[:, ::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef const double[:, ::1] uv = np.ascontiguousarray(uloc, dtype=np.float64)
    cdef Py_ssize_t nc = Nv.shape[0], nm = Nv.shape[1], nq = Nv.shape[2]
    fbar_arr = np.zeros((nc, nm))
    kf_arr = np.zeros((nc, nm, nm))
    cdef double[:, ::1] fbar = fbar_arr
    cdef double[:, :, ::1] kf = kf_arr
    cdef double[::1] gd = np.zeros(nm)
    cdef Py_ssize_t c, a, b, q
    cdef double u, gx, gy, f2, f3, wq, ga

    for c in range(nc):
        for q in range(nq):
            u = 0.0
            gx = 0.0
            gy = 0.0
            for a in range(nm):
                u += uv[c, a] * Nv[c, a, q]
                gx += uv[c, a] * Gv[c, a, q, 0]
                gy += uv[c, a] * Gv[c, a, q, 1]
            f2 = 3.0 * sigma * u * u - nu
            f3 = 6.0 * sigma * u
            wq = wv[c, q]
            for a in range(nm):
                gd[a] = Gv[c, a, q, 0] * gx + Gv[c, a, q, 1] * gy
                fbar[c, a] += wq * f2 * gd[a]
            for a in range(nm):
                ga = wq * f3 * gd[a]
                for b in range(nm):
                    kf[c, a, b] += (wq * f2 * (Gv[c, a, q, 0] * Gv[c, b, q, 0]
                                               + Gv[c, a, q, 1] * Gv[c, b, q, 1])
                                    + ga * Nv[c, b, q])
    return fbar_arr, kf_arr
