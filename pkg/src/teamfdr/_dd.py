"""Double-double kernels for the discrete null machinery.

Every probability table is carried as an unevaluated sum ``hi + lo`` of two
float64 arrays, so truncation, convolution and tail sums are accurate to about
1e-32 relative.  Rounding the final ``hi + lo`` to float64 then gives the
correctly rounded value of the exact arithmetic on the seeded pmf, which is
what makes the convolution agree bit-for-bit with brute-force enumeration.
"""

import numpy as np
from numba import njit

_SPLITTER = 134217729.0  # 2**27 + 1


@njit(cache=True, inline="always")
def _two_sum(a, b):
    s = a + b
    bb = s - a
    err = (a - (s - bb)) + (b - bb)
    return s, err


@njit(cache=True, inline="always")
def _fast_two_sum(a, b):
    s = a + b
    err = b - (s - a)
    return s, err


@njit(cache=True, inline="always")
def _split(a):
    c = _SPLITTER * a
    hi = c - (c - a)
    return hi, a - hi


@njit(cache=True, inline="always")
def _two_prod(a, b):
    p = a * b
    ah, al = _split(a)
    bh, bl = _split(b)
    err = ((ah * bh - p) + ah * bl + al * bh) + al * bl
    return p, err


@njit(cache=True, inline="always")
def _dd_add(ah, al, bh, bl):
    s, e = _two_sum(ah, bh)
    e += al + bl
    return _fast_two_sum(s, e)


@njit(cache=True, inline="always")
def _dd_mul(ah, al, bh, bl):
    p, e = _two_prod(ah, bh)
    e += ah * bl + al * bh
    return _fast_two_sum(p, e)


@njit(cache=True, inline="always")
def _dd_div(ah, al, bh, bl):
    q1 = ah / bh
    ph, pl = _dd_mul(q1, 0.0, bh, bl)
    rh, rl = _dd_add(ah, al, -ph, -pl)
    q2 = rh / bh
    ph, pl = _dd_mul(q2, 0.0, bh, bl)
    rh, rl = _dd_add(rh, rl, -ph, -pl)
    q3 = rh / bh
    qh, ql = _fast_two_sum(q1, q2)
    return _dd_add(qh, ql, q3, 0.0)


@njit(cache=True)
def dd_sum(hi, lo, stop):
    """Sum of entries ``0 .. stop-1``."""
    sh = 0.0
    sl = 0.0
    for k in range(stop):
        sh, sl = _dd_add(sh, sl, hi[k], lo[k])
    return sh, sl


@njit(cache=True)
def dd_scale(hi, lo, stop, dh, dl):
    """Entries ``0 .. stop-1`` divided by ``dh + dl``."""
    out_hi = np.empty(stop)
    out_lo = np.empty(stop)
    for k in range(stop):
        out_hi[k], out_lo[k] = _dd_div(hi[k], lo[k], dh, dl)
    return out_hi, out_lo


@njit(cache=True)
def dd_suffix(hi, lo):
    """Tail table ``G[x] = sum_{k > x} pmf[k]`` accumulated from the far end."""
    n = hi.shape[0]
    out_hi = np.zeros(n)
    out_lo = np.zeros(n)
    sh = 0.0
    sl = 0.0
    for x in range(n - 1, -1, -1):
        out_hi[x] = sh
        out_lo[x] = sl
        sh, sl = _dd_add(sh, sl, hi[x], lo[x])
    return out_hi, out_lo


@njit(cache=True)
def dd_convolve(ah, al, bh, bl):
    na = ah.shape[0]
    nb = bh.shape[0]
    out_hi = np.zeros(na + nb - 1)
    out_lo = np.zeros(na + nb - 1)
    for k in range(na + nb - 1):
        j0 = max(0, k - nb + 1)
        j1 = min(na - 1, k)
        sh = 0.0
        sl = 0.0
        for j in range(j0, j1 + 1):
            ph, pl = _dd_mul(ah[j], al[j], bh[k - j], bl[k - j])
            sh, sl = _dd_add(sh, sl, ph, pl)
        out_hi[k] = sh
        out_lo[k] = sl
    return out_hi, out_lo
