"""Compiled Tukey-bisquare kernels for the IRLS inner loop.

These mirror ``score.m_scale`` (Newton method) and the tau weight assembly
for the Tukey family only; other families use the NumPy path.
"""
import math

import numpy as np
from numba import njit

MAD_CONSISTENCY = 0.6745

# status codes returned by tukey_tau_weights
OK = 0
EXACT_FIT = 1
DEGENERATE = 2


@njit(cache=True)
def _gap_slope(a, s, c, b):
    tot = 0.0
    slope = 0.0
    for i in range(a.size):
        t = (a[i] / s / c) ** 2
        if t < 1.0:
            q = 1.0 - t
            tot += 1.0 - q * q * q
            slope += 6.0 * t * q * q
        else:
            tot += 1.0
    n = a.size
    return tot / n - b, slope / n


@njit(cache=True)
def tukey_m_scale(r, c, b, tol, max_iter):
    a = np.abs(r)
    s = np.median(a) / MAD_CONSISTENCY
    if s == 0.0:
        return 0.0, 0, True
    gap, slope = _gap_slope(a, s, c, b)
    for it in range(1, max_iter + 1):
        if abs(gap) <= tol * b:
            return s, it, True
        s_fp = s * math.sqrt(1.0 + gap / b)
        if slope > 0.0:
            step = min(max(gap / slope, -1.0), 1.0)
            s_nt = s * math.exp(step)
            gap_nt, slope_nt = _gap_slope(a, s_nt, c, b)
            if abs(gap_nt) < abs(gap):
                s, gap, slope = s_nt, gap_nt, slope_nt
                continue
        s = s_fp
        gap, slope = _gap_slope(a, s, c, b)
    return s, max_iter, abs(gap) <= tol * b


@njit(cache=True)
def tukey_tau_weights(r, c1, c2, b, tol, max_iter):
    """Return (status, sigma_M, z, loss) for residuals r.

    loss is sigma_M^2 * mean(rho2(r / sigma_M)), z the IRLS weights.
    """
    m = r.size
    z = np.zeros(m)
    s, _, _ = tukey_m_scale(r, c1, b, tol, max_iter)
    if s == 0.0:
        return EXACT_FIT, 0.0, z, 0.0
    num = 0.0
    den = 0.0
    rho2_sum = 0.0
    k1 = 6.0 / (c1 * c1)
    k2 = 6.0 / (c2 * c2)
    for i in range(m):
        u = r[i] / s
        t1 = (u / c1) ** 2
        if t1 < 1.0:
            q1 = 1.0 - t1
            den += k1 * u * u * q1 * q1
        t2 = (u / c2) ** 2
        if t2 < 1.0:
            q2 = 1.0 - t2
            rho2 = 1.0 - q2 * q2 * q2
            num += 2.0 * rho2 - k2 * u * u * q2 * q2
        else:
            rho2 = 1.0
            num += 2.0
        rho2_sum += rho2
    if not den > 0.0:
        return DEGENERATE, s, z, 0.0
    w = num / den
    for i in range(m):
        u = r[i] / s
        if u == 0.0:
            continue
        # psi(u) / (2u) for the bisquare is 3/c^2 * (1 - (u/c)^2)^2
        t1 = (u / c1) ** 2
        t2 = (u / c2) ** 2
        zi = 0.0
        if t1 < 1.0:
            zi += w * 0.5 * k1 * (1.0 - t1) ** 2
        if t2 < 1.0:
            zi += 0.5 * k2 * (1.0 - t2) ** 2
        z[i] = zi
    return OK, s, z, s * s * rho2_sum / m
