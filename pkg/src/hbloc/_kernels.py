"""Compiled inner loops."""
import math

import numpy as np
from numba import njit

# exp(-40) ~ 4e-18: grid nodes below this fraction of the peak carry no mass
_LOG_CUTOFF = 40.0


@njit(cache=True)
def grid_inverse_cdf(centers, A, coef, r, theta0, half, t, u, edge_tol, out, bad):
    """Inverse-CDF draws from ``p(s) ~ exp(-A/(2e^s) - (e^s/theta0)^r + coef*s)``.

    Nodes are ``s_j = centers[k] + half * t[j]``.  ``coef`` already contains
    the Jacobian of ``theta = e^s``.  Components whose density is not
    negligible at a grid end are flagged in ``bad`` and left untouched.
    """
    n = t.size
    ht = half * t
    e_r = np.exp(r * ht)
    e_m = np.exp(-ht)
    logp = np.empty(n)
    mass = np.empty(n - 1)
    for k in range(centers.size):
        c0 = centers[k]
        a1 = 0.5 * A[k] * math.exp(-c0)
        a2 = (math.exp(c0) / theta0) ** r
        ck = coef[k]
        mx = -np.inf
        for j in range(n):
            v = ck * ht[j] - a2 * e_r[j]
            if a1 != 0.0:
                v -= a1 * e_m[j]
            logp[j] = v
            if v > mx:
                mx = v
        if not np.isfinite(mx):
            bad[k] = True
            continue
        lo_cut = mx - _LOG_CUTOFF
        p_first = math.exp(logp[0] - mx) if logp[0] > lo_cut else 0.0
        p_last = math.exp(logp[n - 1] - mx) if logp[n - 1] > lo_cut else 0.0
        if p_first > edge_tol or p_last > edge_tol:
            bad[k] = True
            continue
        bad[k] = False
        # log density is concave in s: the support above the cutoff is one interval
        jlo = 0
        while logp[jlo] <= lo_cut:
            jlo += 1
        jhi = n - 1
        while logp[jhi] <= lo_cut:
            jhi -= 1
        jlo = max(jlo - 1, 0)
        jhi = min(jhi + 1, n - 1)
        total = 0.0
        p_prev = math.exp(logp[jlo] - mx) if logp[jlo] > lo_cut else 0.0
        for j in range(jlo, jhi):
            v = logp[j + 1]
            p_next = math.exp(v - mx) if v > lo_cut else 0.0
            m = 0.5 * (p_prev + p_next) * (ht[j + 1] - ht[j])
            mass[j] = m
            total += m
            p_prev = p_next
        target = u[k] * total
        acc = 0.0
        jj = jhi - 1
        for j in range(jlo, jhi):
            if acc + mass[j] >= target and mass[j] > 0.0:
                jj = j
                break
            acc += mass[j]
        frac = (target - acc) / mass[jj] if mass[jj] > 0.0 else 0.5
        if frac < 0.0:
            frac = 0.0
        elif frac > 1.0:
            frac = 1.0
        out[k] = c0 + ht[jj] + frac * (ht[jj + 1] - ht[jj])
