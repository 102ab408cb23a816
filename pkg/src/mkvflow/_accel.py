"""Hot loops with a numba path and a pure-numpy fallback.

Set ``MKVFLOW_PURE_NUMPY=1`` to force the numpy implementations (useful for
debugging and for the benchmark that compares both paths). Both paths follow
the same summation order per output cell so results agree to rounding.
"""
import math
import os

import numpy as np
from scipy.special import ndtr

try:
    import numba
    from numba import njit
    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False

USE_NUMBA = _HAVE_NUMBA and os.environ.get("MKVFLOW_PURE_NUMPY", "0") not in ("1", "true", "yes")

_SQRT2 = math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def set_threads(n):
    if USE_NUMBA and n:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


# ---------------------------------------------------------------------------
# Gaussian residual operator: product integration of rows against
# second differences of the Gaussian density and CDF (piecewise-linear rows).

def _residual_weights_np(z, h, y, var, ca_z, ca_y, cb_z):
    zz = np.concatenate(([z[0] - h], z, [z[-1] + h]))
    sd = np.sqrt(var)
    u = (zz[:, None] - y[None, :]) / sd[None, :]
    G = np.exp(-0.5 * u * u) * (_INV_SQRT2PI / sd[None, :])
    C = ndtr(u)
    d2g = (G[2:] - 2.0 * G[1:-1] + G[:-2]) / h
    d2c = (C[2:] - 2.0 * C[1:-1] + C[:-2]) / h
    return (ca_z[:, None] - ca_y[None, :]) * d2g + cb_z[:, None] * d2c


def residual_weights_np(z, h, y, var, ca_z, ca_y, cb_z):
    return _residual_weights_np(z, h, y, var, ca_z, ca_y, cb_z)


if _HAVE_NUMBA:
    @njit(cache=True)
    def _residual_weights_nb(z, h, y, var, ca_z, ca_y, cb_z):
        n = z.shape[0]
        ny = y.shape[0]
        W = np.zeros((n, ny))
        G = np.empty(n + 2)
        C = np.empty(n + 2)
        for l in range(ny):
            sd = math.sqrt(var[l])
            # nodes beyond 40 sd contribute below double precision
            m0 = int(math.floor((y[l] - 40.0 * sd - z[0]) / h))
            m1 = int(math.ceil((y[l] + 40.0 * sd - z[0]) / h)) + 2
            # one extra node each side so every stencil below reads fresh values
            g0 = max(m0 - 1, 0)
            g1 = min(m1 + 1, n + 2)
            for m in range(g0, g1):
                zm = z[0] + (m - 1) * h
                u = (zm - y[l]) / sd
                G[m] = math.exp(-0.5 * u * u) * 0.3989422804014327 / sd
                C[m] = 0.5 * math.erfc(-u / 1.4142135623730951)
            for m in range(max(g0 + 1, 1), min(g1 - 1, n + 1)):
                d2g = (G[m + 1] - 2.0 * G[m] + G[m - 1]) / h
                d2c = (C[m + 1] - 2.0 * C[m] + C[m - 1]) / h
                W[m - 1, l] = (ca_z[m - 1] - ca_y[l]) * d2g + cb_z[m - 1] * d2c
        return W


def _residual_weights_toeplitz(z, h, var, ca, cb):
    # y == z and a common variance: the hat integrals depend on m - l only
    n = z.shape[0]
    off = h * np.arange(-n - 1, n + 2)
    sd = math.sqrt(var)
    u = off / sd
    G = np.exp(-0.5 * u * u) * (_INV_SQRT2PI / sd)
    C = ndtr(u)
    d2g = (G[2:] - 2.0 * G[1:-1] + G[:-2]) / h
    d2c = (C[2:] - 2.0 * C[1:-1] + C[:-2]) / h
    idx = np.arange(n)[:, None] - np.arange(n)[None, :] + n
    return (ca[:, None] - ca[None, :]) * d2g[idx] + cb[:, None] * d2c[idx]


def residual_weights(z, h, y, var, ca_z, ca_y, cb_z):
    """Matrix W[m, l] integrating the hat function at z[m] against
    (ca_z - ca_y[l]) d2/dz2 G + cb_z d/dz G, frozen at node m, where G is the
    Gaussian density in z with mean y[l] and variance var[l].  Requires a
    uniform grid z with spacing h."""
    args = (np.ascontiguousarray(z, float), float(h), np.ascontiguousarray(y, float),
            np.ascontiguousarray(var, float), np.ascontiguousarray(ca_z, float),
            np.ascontiguousarray(ca_y, float), np.ascontiguousarray(cb_z, float))
    if args[2] is args[0] or (args[2].shape == args[0].shape and np.array_equal(args[2], args[0])):
        if np.ptp(args[3]) == 0.0 and np.array_equal(args[4], args[5]):
            return _residual_weights_toeplitz(args[0], args[1], float(args[3][0]), args[4], args[6])
    if USE_NUMBA:
        return _residual_weights_nb(*args)
    return residual_weights_np(*args)


def residual_apply(rows, z, h, y, var, ca_z, ca_y, cb_z):
    """rows @ residual_weights(...)."""
    return np.ascontiguousarray(rows, float) @ residual_weights(z, h, y, var, ca_z, ca_y, cb_z)


def cell_gauss_np(edges, z, sd):
    """M[j, m] = P(edges[j] < X < edges[j+1]) for X ~ N(z[m], sd[m]^2)."""
    F = ndtr((edges[:, None] - z[None, :]) / sd[None, :])
    return np.diff(F, axis=0)


if _HAVE_NUMBA:
    @njit(cache=True)
    def _cell_gauss_nb(edges, z, sd):
        ne = edges.shape[0]
        nz = z.shape[0]
        M = np.zeros((ne - 1, nz))
        for m in range(nz):
            prev = 0.5 * math.erfc(-(edges[0] - z[m]) / (sd[m] * 1.4142135623730951))
            for j in range(1, ne):
                u = (edges[j] - z[m]) / sd[m]
                if u < -40.0:
                    prev = 0.0
                    continue
                cur = 0.5 * math.erfc(-u / 1.4142135623730951)
                M[j - 1, m] = cur - prev
                prev = cur
                if u > 40.0:
                    break
        return M


def cell_gauss(edges, z, sd):
    args = (np.ascontiguousarray(edges, float), np.ascontiguousarray(z, float),
            np.ascontiguousarray(sd, float))
    if USE_NUMBA:
        return _cell_gauss_nb(*args)
    return cell_gauss_np(*args)


# ---------------------------------------------------------------------------
# Pairwise interaction sums.

def pair_power_sum_np(x, y, w, kappa, eps):
    out = np.zeros_like(x)
    step = max(1, int(4_000_000 // max(1, y.shape[0])))
    for i0 in range(0, x.shape[0], step):
        diff = x[i0:i0 + step, None, :] - y[None, :, :]
        r = np.sqrt((diff * diff).sum(-1))
        r = np.maximum(r, eps)
        fac = w[None, :] * r ** (-kappa)
        out[i0:i0 + step] = (diff * fac[:, :, None]).sum(1)
    return out


def pair_gauss_sum_np(x, y, w, ell):
    out = np.zeros(x.shape[0])
    step = max(1, int(4_000_000 // max(1, y.shape[0])))
    for i0 in range(0, x.shape[0], step):
        diff = x[i0:i0 + step, None, :] - y[None, :, :]
        r2 = (diff * diff).sum(-1)
        out[i0:i0 + step] = (w[None, :] * np.exp(-0.5 * r2 / (ell * ell))).sum(1)
    return out


if _HAVE_NUMBA:
    @njit(cache=True)
    def _pair_power_sum_nb(x, y, w, kappa, eps):
        n, d = x.shape
        m = y.shape[0]
        out = np.zeros((n, d))
        for i in range(n):
            for j in range(m):
                r2 = 0.0
                for k in range(d):
                    dk = x[i, k] - y[j, k]
                    r2 += dk * dk
                r = math.sqrt(r2)
                if r < eps:
                    r = eps
                fac = w[j] * r ** (-kappa)
                for k in range(d):
                    out[i, k] += (x[i, k] - y[j, k]) * fac
        return out

    @njit(cache=True)
    def _pair_gauss_sum_nb(x, y, w, ell):
        n, d = x.shape
        m = y.shape[0]
        out = np.zeros(n)
        c = 0.5 / (ell * ell)
        for i in range(n):
            acc = 0.0
            for j in range(m):
                r2 = 0.0
                for k in range(d):
                    dk = x[i, k] - y[j, k]
                    r2 += dk * dk
                acc += w[j] * math.exp(-c * r2)
            out[i] = acc
        return out


def pair_power_sum(x, y, w, kappa, eps):
    """sum_j w_j (x_i - y_j) / max(|x_i - y_j|, eps)^kappa."""
    x = np.ascontiguousarray(x, float)
    y = np.ascontiguousarray(y, float)
    w = np.ascontiguousarray(w, float)
    if USE_NUMBA:
        return _pair_power_sum_nb(x, y, w, float(kappa), float(eps))
    return pair_power_sum_np(x, y, w, float(kappa), float(eps))


def pair_gauss_sum(x, y, w, ell):
    """sum_j w_j exp(-|x_i - y_j|^2 / (2 ell^2))."""
    x = np.ascontiguousarray(x, float)
    y = np.ascontiguousarray(y, float)
    w = np.ascontiguousarray(w, float)
    if USE_NUMBA:
        return _pair_gauss_sum_nb(x, y, w, float(ell))
    return pair_gauss_sum_np(x, y, w, float(ell))


# ---------------------------------------------------------------------------
# Batched tridiagonal solves (one system per row of the inputs).

def thomas_batch_np(lower, diag, upper, rhs):
    n = diag.shape[1]
    cp = np.empty_like(diag)
    dp = np.empty_like(rhs)
    cp[:, 0] = upper[:, 0] / diag[:, 0]
    dp[:, 0] = rhs[:, 0] / diag[:, 0]
    for i in range(1, n):
        den = diag[:, i] - lower[:, i] * cp[:, i - 1]
        cp[:, i] = upper[:, i] / den
        dp[:, i] = (rhs[:, i] - lower[:, i] * dp[:, i - 1]) / den
    out = np.empty_like(rhs)
    out[:, -1] = dp[:, -1]
    for i in range(n - 2, -1, -1):
        out[:, i] = dp[:, i] - cp[:, i] * out[:, i + 1]
    return out


if _HAVE_NUMBA:
    @njit(cache=True)
    def _thomas_batch_nb(lower, diag, upper, rhs):
        nl, n = diag.shape
        out = np.empty_like(rhs)
        cp = np.empty(n)
        dp = np.empty(n)
        for b in range(nl):
            cp[0] = upper[b, 0] / diag[b, 0]
            dp[0] = rhs[b, 0] / diag[b, 0]
            for i in range(1, n):
                den = diag[b, i] - lower[b, i] * cp[i - 1]
                cp[i] = upper[b, i] / den
                dp[i] = (rhs[b, i] - lower[b, i] * dp[i - 1]) / den
            out[b, n - 1] = dp[n - 1]
            for i in range(n - 2, -1, -1):
                out[b, i] = dp[i] - cp[i] * out[b, i + 1]
        return out


def thomas_batch(lower, diag, upper, rhs):
    """Solve tridiagonal systems; lower[:, 0] and upper[:, -1] are ignored."""
    args = [np.ascontiguousarray(a, float) for a in (lower, diag, upper, rhs)]
    if USE_NUMBA:
        return _thomas_batch_nb(*args)
    return thomas_batch_np(*args)
