"""Pure numpy versions of the hot kernels.

Used when the compiled extension is unavailable, and as the reference the
compiled kernels are benchmarked and tested against.
"""

import numpy as np


def basis_ders(knots, p, spans, x, nders):
    """Nonzero B-spline values and derivatives at many points.

    ``spans[k]`` is the knot span index of ``x[k]`` (knots[s] <= x < knots[s+1],
    or the span the caller wants to use when x sits on a span boundary).
    Returns an array of shape ``(npts, nders+1, p+1)``.
    """
    knots = np.asarray(knots, dtype=float)
    x = np.asarray(x, dtype=float)
    spans = np.asarray(spans, dtype=np.intp)
    npts = x.shape[0]
    ndu = np.zeros((p + 1, p + 1, npts))
    left = np.zeros((p + 1, npts))
    right = np.zeros((p + 1, npts))
    ndu[0, 0] = 1.0
    for j in range(1, p + 1):
        left[j] = x - knots[spans + 1 - j]
        right[j] = knots[spans + j] - x
        saved = np.zeros(npts)
        for r in range(j):
            ndu[j, r] = right[r + 1] + left[j - r]
            temp = ndu[r, j - 1] / ndu[j, r]
            ndu[r, j] = saved + right[r + 1] * temp
            saved = left[j - r] * temp
        ndu[j, j] = saved

    ders = np.zeros((nders + 1, p + 1, npts))
    ders[0] = ndu[:, p]
    a = np.zeros((2, p + 1, npts))
    for r in range(p + 1):
        s1, s2 = 0, 1
        a[:] = 0.0
        a[0, 0] = 1.0
        for k in range(1, nders + 1):
            d = np.zeros(npts)
            rk = r - k
            pk = p - k
            if r >= k:
                a[s2, 0] = a[s1, 0] / ndu[pk + 1, rk]
                d += a[s2, 0] * ndu[rk, pk]
            j1 = 1 if rk >= -1 else -rk
            j2 = k - 1 if r - 1 <= pk else p - r
            for j in range(j1, j2 + 1):
                a[s2, j] = (a[s1, j] - a[s1, j - 1]) / ndu[pk + 1, rk + j]
                d += a[s2, j] * ndu[rk + j, pk]
            if r <= pk:
                a[s2, k] = -a[s1, k - 1] / ndu[pk + 1, r]
                d += a[s2, k] * ndu[r, pk]
            ders[k, r] = d
            s1, s2 = s2, s1
    fac = float(p)
    for k in range(1, nders + 1):
        ders[k] *= fac
        fac *= p - k
    return np.ascontiguousarray(ders.transpose(2, 0, 1))


def nonlinear_local(N, G, w, uloc, sigma, nu):
    """Element contributions of the nonlinear flux vector and its Jacobian.

    Shapes: N (nc, nm, nq), G (nc, nm, nq, 2), w (nc, nq), uloc (nc, nm).
    Returns ``(fbar, kf)`` with shapes (nc, nm) and (nc, nm, nm).
    """
    u = np.einsum("ca,caq->cq", uloc, N)
    gu = np.einsum("ca,caqd->cqd", uloc, G)
    f2 = 3.0 * sigma * u * u - nu
    f3 = 6.0 * sigma * u
    gdot = np.einsum("caqd,cqd->caq", G, gu)
    fbar = np.einsum("cq,caq->ca", w * f2, gdot)
    kf = np.einsum("cq,caqd,cbqd->cab", w * f2, G, G)
    kf += np.einsum("cq,caq,cbq->cab", w * f3, gdot, N)
    return fbar, kf
