"""Parametrix construction of transition densities p(s,x;t,y) and kernel certifiers.

The series p = sum_n p_0 (x) Phi^(x)n is built row by row: a row is
p_n(s, x; tau, .) for one starting point x (or one starting density) sampled
on a uniform y grid, and

    p_{n+1}(s, x; t, y) = int_s^t int p_n(s, x; tau, z) Phi(tau, z; t, y) dz dtau.

In d = 1 the z integral treats the row as piecewise linear and integrates the
hat functions exactly against the second and first z-derivatives of the frozen
Gaussian (closed forms in the density and the CDF).  The tau integral uses
panels graded toward both endpoints, with a Gauss-Jacobi panel absorbing the
(t - tau)^(alpha/2 - 1) singularity at the top.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, roots_jacobi

from . import _accel
from .errors import (AssumptionViolation, DomainError, EllipticityError, IndexSetError,
                     NegativeKernel, NoEnvelope, SeriesDiverging)
from .kato import SpaceTimeField, in_index_set, lpq_norm
from .reports import CertReport, PropertyReport

_GL8 = np.polynomial.legendre.leggauss(8)


# ---------------------------------------------------------------------------
# Coefficients.

@dataclass
class CoefficientField:
    """a(t, x) (symmetric, a = sigma sigma^T / 2) and b(t, x).

    ``a_fn(t, x)`` gets t of shape (n,) and x of shape (n, d) and returns
    (n,) when d = 1 or (n, d, d).  ``b_fn`` returns (n,) or (n, d); None
    means b = 0.
    """
    a_fn: object
    b_fn: object = None
    d: int = 1
    Lam: float = 1.0
    alpha: float = 1.0
    N1: float = 0.0
    N2: float = 0.0
    p: float = math.inf
    q: float = math.inf
    t_breaks: tuple = ()
    singular_points: tuple = ()
    a_space_constant: bool = False
    name: str = "field"

    @classmethod
    def constant(cls, a=0.5, b=0.0, d=1):
        a_mat = np.atleast_2d(np.asarray(a, float)) if d > 1 else None
        if d > 1 and a_mat.shape != (d, d):
            a_mat = float(a) * np.eye(d)
        if d == 1:
            a_fn = lambda t, x: np.full(len(t), float(a))
        else:
            a_fn = lambda t, x: np.broadcast_to(a_mat, (len(t), d, d)).copy()
        b_vec = np.broadcast_to(np.asarray(b, float), (d,)).copy()
        b_fn = None
        if np.any(b_vec != 0):
            b_fn = (lambda t, x: np.full(len(t), b_vec[0])) if d == 1 else \
                (lambda t, x: np.broadcast_to(b_vec, (len(t), d)).copy())
        eig = np.linalg.eigvalsh(np.atleast_2d(a_mat if d > 1 else [[float(a)]]))
        lam = max(eig.max(), 1.0 / eig.min(), 1.0)
        return cls(a_fn, b_fn, d, Lam=lam, alpha=1.0, N1=0.0, N2=float(np.abs(b_vec).max()),
                   a_space_constant=True, name=f"const(a={a}, b={b})")

    def a(self, t, x):
        t = np.asarray(t, float).reshape(-1)
        x = np.asarray(x, float).reshape(len(t), self.d)
        v = np.asarray(self.a_fn(t, x), float)
        return v.reshape(len(t), self.d, self.d)

    def b(self, t, x):
        t = np.asarray(t, float).reshape(-1)
        x = np.asarray(x, float).reshape(len(t), self.d)
        if self.b_fn is None:
            return np.zeros((len(t), self.d))
        return np.asarray(self.b_fn(t, x), float).reshape(len(t), self.d)

    def a1(self, t, z):
        """Scalar a for d = 1 on a 1-d array of points."""
        z = np.asarray(z, float)
        t = np.broadcast_to(np.asarray(t, float), z.shape).reshape(-1)
        return np.asarray(self.a_fn(t, z.reshape(-1, 1)), float).reshape(z.shape)

    def b1(self, t, z):
        z = np.asarray(z, float)
        if self.b_fn is None:
            return np.zeros(z.shape)
        t = np.broadcast_to(np.asarray(t, float), z.shape).reshape(-1)
        return np.asarray(self.b_fn(t, z.reshape(-1, 1)), float).reshape(z.shape)

    @property
    def has_drift(self):
        return self.b_fn is not None

    def drift_field(self):
        """|b| as a SpaceTimeField (for norms and Kato functionals)."""
        if self.b_fn is None:
            return SpaceTimeField.zero(self.d)
        d = self.d

        def fn(t, x):
            v = self.b(t, x)
            return np.sqrt((v * v).sum(-1))
        return SpaceTimeField(fn, d, None, tuple(np.atleast_1d(sp) for sp in self.singular_points),
                              False, f"|b| of {self.name}")

    def validate(self, box=(-4.0, 4.0), n=33, times=None, sample_tol=0.05):
        """Spot-check ellipticity, the Holder bound and the index condition."""
        if not in_index_set(1.0, self.p, self.q, self.d):
            raise IndexSetError(f"(p,q)=({self.p},{self.q}) outside I_1 for d={self.d}")
        times = np.linspace(0.0, 1.0, 9) if times is None else np.asarray(times, float)
        ax = np.linspace(box[0], box[1], n)
        if self.d == 1:
            pts = ax[:, None]
        else:
            g = np.meshgrid(*([ax] * self.d), indexing="ij")
            pts = np.stack([m.ravel() for m in g], -1)
        for t in times:
            A = self.a(np.full(len(pts), t), pts)
            eig = np.linalg.eigvalsh(A)
            if eig.min() < 1.0 / self.Lam * (1 - 1e-12) or eig.max() > self.Lam * (1 + 1e-12):
                raise EllipticityError("eigenvalues of a leave [1/Lam, Lam]", t=float(t),
                                       min_eig=float(eig.min()), max_eig=float(eig.max()))
            if self.N1 > 0 and not self.a_space_constant:
                flat = A.reshape(len(pts), -1)
                dif = np.abs(flat[:, None, :] - flat[None, :, :]).max(-1)
                dist = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
                mask = dist > 0
                quot = (dif[mask] / dist[mask] ** self.alpha).max()
                if quot > self.N1 * (1.0 + sample_tol):
                    raise AssumptionViolation("Holder quotient of a exceeds N1", t=float(t),
                                              quotient=float(quot), N1=self.N1)
        return True


# ---------------------------------------------------------------------------
# Frozen Gaussian and the residual Phi = (L - L_0) p_0.

def _A_integral(coeffs, s, t, y):
    """A_{s,t}(y) by 8-node Gauss-Legendre per window between time breaks; y (n, d)."""
    y = np.atleast_2d(np.asarray(y, float))
    cuts = [s] + [b for b in coeffs.t_breaks if s < b < t] + [t]
    A = np.zeros((len(y), coeffs.d, coeffs.d))
    gx, gw = _GL8
    for a0, a1 in zip(cuts[:-1], cuts[1:]):
        taus = 0.5 * (a0 + a1) + 0.5 * (a1 - a0) * gx
        for tk, wk in zip(taus, gw):
            A += 0.5 * (a1 - a0) * wk * coeffs.a(np.full(len(y), tk), y)
    return A


def frozen_gaussian(coeffs, s, x, t, y):
    """p_0(s,x;t,y) = exp(-<A^{-1}(x-y), x-y>/4) / sqrt((4 pi)^d det A), A = A_{s,t}(y)."""
    if not t > s:
        raise DomainError("need s < t")
    d = coeffs.d
    x = np.asarray(x, float).reshape(-1, d)
    y = np.asarray(y, float).reshape(-1, d)
    A = _A_integral(coeffs, s, t, y)
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        raise EllipticityError("A_{s,t}(y) is not positive definite") from None
    v = x - y
    w = np.linalg.solve(L, v[..., None])[..., 0]
    quad = (w * w).sum(-1)
    det = np.prod(np.diagonal(L, axis1=-2, axis2=-1), -1) ** 2
    out = np.exp(-0.25 * quad) / np.sqrt((4.0 * math.pi) ** d * det)
    return float(out[0]) if out.size == 1 else out


def parametrix_term(coeffs, s, x, t, y):
    """Phi(s,x;t,y) = sum_ij (a_ij(s,x) - a_ij(s,y)) d_ij p_0 + sum_i b_i(s,x) d_i p_0,
    with exact Gaussian derivatives in x."""
    d = coeffs.d
    x = np.asarray(x, float).reshape(-1, d)
    y = np.asarray(y, float).reshape(-1, d)
    A = _A_integral(coeffs, s, t, y)
    Ainv = np.linalg.inv(A)
    p0 = np.atleast_1d(frozen_gaussian(coeffs, s, x, t, y))
    v = x - y
    g = -0.5 * np.einsum("nij,nj->ni", Ainv, v)                    # grad log p0
    hess = np.einsum("ni,nj->nij", g, g) - 0.5 * Ainv             # (d2 p0) / p0
    da = coeffs.a(np.full(len(x), s), x) - coeffs.a(np.full(len(y), s), y)
    bx = coeffs.b(np.full(len(x), s), x)
    out = (np.einsum("nij,nij->n", da, hess) + np.einsum("ni,ni->n", bx, g)) * p0
    return float(out[0]) if out.size == 1 else out


# ---------------------------------------------------------------------------
# Configuration and kernel container.

@dataclass
class SeriesConfig:
    N_trunc: int = 6
    lam_report: float = 0.25
    tau_panels: int = 3
    tau_nodes: int = 4
    tau_global: int = 24
    T_window: float = 1.0
    T_min: float = 1.0 / 64.0
    ratio_accept: float = 0.5
    ratio_fail: float = 0.9
    neg_tol: float = 1e-6
    mass_tol: float = 0.01
    renormalize: bool = False
    cell_output: bool = False

    def __post_init__(self):
        if self.N_trunc < 1 or not (0 < self.T_window <= 1):
            raise DomainError("N_trunc >= 1 and T_window in (0, 1] required")

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class KernelGrid:
    """p(s, x; t, y) on x_nodes x t_nodes x (cell centers of y_box).

    For density-started propagations ``x_nodes`` is empty and each row is
    labelled by its index in ``meta['rows']``.
    """
    s: float
    t_nodes: np.ndarray
    x_nodes: np.ndarray
    y_box: tuple
    values: np.ndarray
    meta: dict = field(default_factory=dict)
    _windows: list = field(default=None, repr=False)
    _coeffs: object = field(default=None, repr=False)

    @property
    def lo(self):
        return float(np.atleast_1d(self.y_box[0])[0])

    @property
    def hi(self):
        return float(np.atleast_1d(self.y_box[1])[0])

    @property
    def cells(self):
        return int(np.atleast_1d(self.y_box[2])[0])

    @property
    def d(self):
        return len(np.atleast_1d(self.y_box[2]))

    @property
    def h(self):
        return (self.hi - self.lo) / self.cells

    @property
    def y_nodes(self):
        lo, hi, c = (np.atleast_1d(v) for v in self.y_box)
        axes = [lo[k] + (np.arange(c[k]) + 0.5) * (hi[k] - lo[k]) / c[k] for k in range(len(c))]
        if len(axes) == 1:
            return axes[0]
        g = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in g], -1)

    def cell_volume(self):
        lo, hi, c = (np.atleast_1d(v) for v in self.y_box)
        return float(np.prod((hi - lo) / c))

    def mass(self):
        """int p dy for every (row, t)."""
        return self.values.sum(-1) * self.cell_volume()

    def write(self, path):
        from . import mkvg
        mkvg.write_kernel(path, self)

    def __sub__(self, other):
        return _DiffKernel(self, other)

    def rows_at(self, tau):
        """Rows on the y grid at an arbitrary tau in (s, t_max]: the frozen
        Gaussian part is recomputed exactly (cell averaged), the series
        remainder is interpolated linearly in sqrt(tau - s)."""
        if self._windows is None:
            raise DomainError("kernel has no attached construction data")
        for w in self._windows:
            if w.w0 < tau <= w.w1 + 1e-15:
                return w.rows_at(tau)
        raise DomainError("tau outside the kernel's time range", tau=tau)


class _DiffKernel:
    def __init__(self, a, b):
        self.a, self.b = a, b
        self.s = a.s
        self.t_nodes = a.t_nodes
        self.x_nodes = a.x_nodes
        self.y_box = a.y_box
        self.values = a.values - b.values
        self.meta = {}

    def rows_at(self, tau):
        return self.a.rows_at(tau) - self.b.rows_at(tau)


# ---------------------------------------------------------------------------
# 1-d engine.

class _Grid1D:
    def __init__(self, lo, hi, cells):
        self.lo, self.hi, self.cells = float(lo), float(hi), int(cells)
        self.h = (self.hi - self.lo) / self.cells
        self.edges = self.lo + self.h * np.arange(self.cells + 1)
        self.z = 0.5 * (self.edges[1:] + self.edges[:-1])


def _tau_rule(s, t, alpha, panels, nodes):
    """Quadrature on [s, t]: panels graded quadratically toward both ends;
    the panel touching t carries the weight (t - tau)^(alpha/2 - 1)."""
    mid = 0.5 * (s + t)
    gx, gw = np.polynomial.legendre.leggauss(nodes)
    e = alpha / 2.0 - 1.0
    jx, jw = roots_jacobi(nodes, e, 0.0)
    taus, wts = [], []
    grade = (np.arange(panels + 1) / panels) ** 2
    left = s + (mid - s) * grade
    for a, b in zip(left[:-1], left[1:]):
        taus.append(0.5 * (a + b) + 0.5 * (b - a) * gx)
        wts.append(0.5 * (b - a) * gw)
    right = t - (t - mid) * grade[::-1]
    for k, (a, b) in enumerate(zip(right[:-1], right[1:])):
        if k == panels - 1:
            r = 0.5 * (b - a)
            tk = 0.5 * (a + b) + r * jx
            taus.append(tk)
            wts.append(r ** (1.0 + e) * jw * (t - tk) ** (-e))
        else:
            taus.append(0.5 * (a + b) + 0.5 * (b - a) * gx)
            wts.append(0.5 * (b - a) * gw)
    return np.concatenate(taus), np.concatenate(wts)


class _CumA:
    """Cumulative int_{t0}^{t} a(tau, y) dtau on a fixed y grid, tabulated at given times."""

    def __init__(self, coeffs, y, times):
        times = np.unique(np.asarray(times, float))
        self.times = times
        cuts = np.unique(np.concatenate([times, [b for b in coeffs.t_breaks
                                                 if times[0] < b < times[-1]]]))
        gx, gw = _GL8
        a0, a1 = cuts[:-1], cuts[1:]
        taus = (0.5 * (a0 + a1)[:, None] + 0.5 * (a1 - a0)[:, None] * gx).ravel()
        w = (0.5 * (a1 - a0)[:, None] * gw).ravel()
        ny = len(y)
        if coeffs.a_space_constant:
            vals = coeffs.a1(taus, np.zeros(len(taus)))[:, None] * np.ones(ny)
        else:
            vals = coeffs.a1(np.repeat(taus, ny), np.tile(y, len(taus))).reshape(len(taus), ny)
        seg = (w[:, None] * vals).reshape(len(a0), 8, ny).sum(1)
        cum = np.vstack([np.zeros(ny), np.cumsum(seg, 0)])
        idx = np.searchsorted(cuts, times)
        self.cum = cum[idx]

    def A(self, tau, t):
        i = np.searchsorted(self.times, tau)
        j = np.searchsorted(self.times, t)
        return self.cum[j] - self.cum[i]


def _gauss_point(x, y, var):
    v = x[:, None] - y[None, :]
    return np.exp(-0.5 * v * v / var[None, :]) / np.sqrt(2.0 * math.pi * var[None, :])


def _cell_avg_point(x, edges, var, h):
    """(1/h) int_{cell m} N(z; x_i, var_m) dz for every row x_i and cell m."""
    sd = np.sqrt(var)[None, :]
    u1 = (edges[None, 1:] - x[:, None]) / sd
    u0 = (edges[None, :-1] - x[:, None]) / sd
    return np.where(u0 > 0, ndtr(-u0) - ndtr(-u1), ndtr(u1) - ndtr(u0)) / h


class _Window:
    """One series window [w0, w1] started from point rows or density rows."""

    def __init__(self, coeffs, grid, w0, w1, init, cfg):
        self.coeffs, self.grid, self.w0, self.w1, self.cfg = coeffs, grid, w0, w1, cfg
        self.kind, self.data = init
        self.node_t = None
        self.rest = None

    def nrows(self):
        return len(self.data)

    def p0_rows(self, tau, cum, cell=True):
        g = self.grid
        var = 2.0 * cum.A(self.w0, tau)
        if self.kind == "points":
            if cell:
                return _cell_avg_point(self.data, g.edges, var, g.h)
            return _gauss_point(self.data, g.z, var)
        return self.data @ _accel.cell_gauss(g.edges, g.z, np.sqrt(var))

    def rows_at(self, tau):
        cum = _CumA(self.coeffs, self.grid.z, [self.w0, tau])
        base = self.p0_rows(tau, cum)
        return base + _interp_u(self.rest, self.node_t, self.w0, tau)


def _interp_u(store, node_t, s, tau):
    """Linear interpolation in u = sqrt(tau - s) of node values, anchored at 0 for u = 0."""
    if store is None or len(node_t) == 0:
        return 0.0
    u_nodes = np.sqrt(np.maximum(node_t - s, 0.0))
    u = math.sqrt(max(tau - s, 0.0))
    k = int(np.searchsorted(u_nodes, u))
    if k < len(u_nodes) and u_nodes[k] == u:
        return store[k]
    if k == 0:
        return store[0] * (u / u_nodes[0])
    if k >= len(u_nodes):
        k = len(u_nodes) - 1
        lam = (u - u_nodes[k - 1]) / (u_nodes[k] - u_nodes[k - 1])
        return store[k - 1] + lam * (store[k] - store[k - 1])
    lam = (u - u_nodes[k - 1]) / (u_nodes[k] - u_nodes[k - 1])
    return (1.0 - lam) * store[k - 1] + lam * store[k]


class ResidualOp:
    """A space-time kernel of residual type acting on rows.

    Each term is (a_fn, b_fn, var_coeffs, sign): it contributes
    sign * [(a(tau,z) - a(tau,y)) d2_z G + b(tau,z) d_z G] where G is the
    frozen Gaussian in z with covariance from var_coeffs' A_{tau,t}(y).
    ``a_fn``/``b_fn`` take (tau, z) with z a 1-d array; None means zero.
    """

    def __init__(self, terms):
        self.terms = list(terms)

    @classmethod
    def of(cls, coeffs):
        b = coeffs.b1 if coeffs.has_drift else None
        return cls([(coeffs.a1, b, coeffs, 1.0)])

    def times(self):
        out = set()
        for _, _, c, _ in self.terms:
            out.update(c.t_breaks)
        return out

    def prepare(self, grid, times):
        self._cums = {id(c): _CumA(c, grid.z, times) for _, _, c, _ in self.terms}

    def weights(self, grid, tau, t, zb):
        W = None
        z = grid.z
        for a_fn, b_fn, c, sign in self.terms:
            ca = a_fn(tau, z) if a_fn is not None else np.zeros(len(z))
            cb = b_fn(tau, zb) if b_fn is not None else np.zeros(len(z))
            if np.ptp(ca) == 0.0 and not np.any(cb):
                continue
            var = 2.0 * self._cums[id(c)].A(tau, t)
            Wk = _accel.residual_weights(z, grid.h, z, var, ca, ca, cb)
            W = sign * Wk if W is None else W + sign * Wk
        return W


def _avoid_nodes(z, h, singular_points):
    zb = z.copy()
    for sp in singular_points:
        sp = float(np.atleast_1d(sp)[0])
        close = np.abs(zb - sp) < 1e-12 * max(1.0, abs(sp))
        zb[close] += 0.5 * h
    return zb


def _series_window(win, targets):
    """Run the series on one window for the given sorted targets in (w0, w1]."""
    coeffs, g, cfg = win.coeffs, win.grid, win.cfg
    s, t_end = win.w0, win.w1
    J = cfg.tau_global
    glob = s + (t_end - s) * (np.arange(1, J + 1) / J) ** 2
    nodes = np.unique(np.concatenate([glob, targets]))
    nodes = nodes[(nodes > s) & (nodes <= t_end + 1e-15)]
    rules = [_tau_rule(s, t, coeffs.alpha, cfg.tau_panels, cfg.tau_nodes) for t in nodes]
    all_t = np.concatenate([[s], nodes] + [r[0] for r in rules])
    cum = _CumA(coeffs, g.z, all_t)
    op = ResidualOp.of(coeffs)
    op._cums = {id(coeffs): cum}
    zb = _avoid_nodes(g.z, g.h, coeffs.singular_points)
    N = cfg.N_trunc
    nr, ny = win.nrows(), len(g.z)
    store = [None] + [np.zeros((len(nodes), nr, ny)) for _ in range(N)]
    for k, t in enumerate(nodes):
        taus, wts = rules[k]
        Ws = [op.weights(g, tau, t, zb) for tau in taus]
        if all(W is None for W in Ws):
            continue
        r0 = [win.p0_rows(tau, cum) for tau in taus]
        for n in range(1, N + 1):
            acc = np.zeros((nr, ny))
            for j, (tau, w) in enumerate(zip(taus, wts)):
                if Ws[j] is None:
                    continue
                rows = r0[j] if n == 1 else _interp_u(store[n - 1][:k + 1], nodes[:k + 1], s, tau)
                acc += w * (rows @ Ws[j])
            store[n][k] = acc
    idx = np.searchsorted(nodes, targets)
    p0 = np.stack([win.p0_rows(t, cum, cell=cfg.cell_output) for t in targets])
    terms = [store[n][idx] for n in range(1, N + 1)]
    sups = [float(np.abs(p0).max())] + [float(np.abs(T).max()) for T in terms]
    rest_nodes = sum(store[n] for n in range(1, N + 1))
    return p0, terms, sups, nodes, rest_nodes


def _term_ratio(sups):
    ratios = []
    for n in range(1, len(sups) - 1):
        if sups[n] > 1e-14 * max(sups[0], 1e-300):
            ratios.append(sups[n + 1] / sups[n])
    return max(ratios) if ratios else 0.0


def propagate(coeffs, init, s, t_nodes, box=(-4.0, 4.0), cells=128, config=None):
    """Series propagation from point rows (init = ('points', x)) or density
    rows (init = ('density', values (nrows, cells))) in d = 1.

    Returns a KernelGrid with values (nrows, n_t, cells).
    """
    cfg = config or SeriesConfig()
    if coeffs.d != 1:
        raise DomainError("propagate works in d = 1; use heat_kernel for d = 2")
    g = _Grid1D(box[0], box[1], cells)
    t_nodes = np.asarray(sorted(set(float(t) for t in t_nodes)), float)
    if t_nodes[0] <= s or t_nodes[-1] > 1.0 + 1e-12:
        raise DomainError("t_nodes must lie in (s, 1]")
    kind, data = init
    data = np.asarray(data, float)
    if kind == "points":
        data = data.reshape(-1)
    T = min(cfg.T_window, t_nodes[-1] - s)
    while True:
        edges = [s]
        while edges[-1] < t_nodes[-1] - 1e-14:
            edges.append(min(edges[-1] + T, float(t_nodes[-1])))
        out = np.zeros((len(data), len(t_nodes), cells))
        windows, ratio, all_sups = [], 0.0, []
        cur = (kind, data)
        ok = True
        for w0, w1 in zip(edges[:-1], edges[1:]):
            win = _Window(coeffs, g, w0, w1, cur, cfg)
            sel = (t_nodes > w0) & (t_nodes <= w1 + 1e-14)
            targets = np.unique(np.concatenate([t_nodes[sel], [w1]]))
            p0, terms, sups, nodes, rest = _series_window(win, targets)
            r = _term_ratio(sups)
            ratio = max(ratio, r)
            if r > cfg.ratio_accept and T / 2.0 >= cfg.T_min:
                ok = False
                break
            if r > cfg.ratio_fail:
                raise SeriesDiverging("term ratio above threshold at the minimal window",
                                      ratio=r, T_window=T)
            total = p0 + sum(terms)
            win.node_t, win.rest = nodes, rest
            windows.append(win)
            all_sups.append(sups)
            pos = np.searchsorted(targets, t_nodes[sel])
            out[:, sel, :] = np.transpose(total[pos], (1, 0, 2))
            end = total[-1]
            cur = ("density", np.clip(end, 0.0, None))
        if ok:
            break
        T = T / 2.0
    neg = float(-min(out.min(), 0.0))
    if neg > cfg.neg_tol:
        raise NegativeKernel("kernel below -neg_tol after truncation", min_value=-neg)
    out = np.clip(out, 0.0, None)
    mass = out.sum(-1) * g.h
    if cfg.renormalize:
        out = out / np.where(mass > 0, mass, 1.0)[..., None]
    last = all_sups[-1]
    tail = last[-1] * ratio / (1.0 - ratio) if ratio < 1 else math.inf
    meta = {"config": cfg.to_dict(), "term_sup": all_sups, "term_ratio": ratio,
            "tail_estimate": tail, "T_window": T, "windows": len(windows),
            "clip_max": neg, "mass_defect": float(np.abs(mass - 1.0).max()),
            "rows": kind}
    xn = data[:, None] if kind == "points" else np.zeros((0, 1))
    return KernelGrid(s, t_nodes, xn, (g.lo, g.hi, cells), out, meta, windows, coeffs)


def default_x_nodes(box, cells, n_x):
    """n_x cell centers spread over the middle half of the box."""
    g = _Grid1D(box[0], box[1], cells)
    lo, hi = 0.75 * g.lo + 0.25 * g.hi, 0.25 * g.lo + 0.75 * g.hi
    cand = np.where((g.z >= lo) & (g.z <= hi))[0]
    pick = np.unique(np.round(np.linspace(cand[0], cand[-1], min(n_x, len(cand)))).astype(int))
    return g.z[pick]


def heat_kernel(coeffs, config=None, s=0.0, t_nodes=None, x_nodes=None, box=(-4.0, 4.0),
                cells=64, n_x=64):
    """Truncated parametrix series sum_{n <= N} p_n on an (x, t, y) grid."""
    cfg = config or SeriesConfig()
    if coeffs.d > 2:
        raise DomainError("heat_kernel supports d in {1, 2}")
    if t_nodes is None:
        t_nodes = s + (1.0 - s) * np.arange(1, 17) / 16.0
    if coeffs.d == 2:
        return _heat_kernel_2d(coeffs, cfg, s, np.asarray(t_nodes, float), x_nodes, box, cells)
    if x_nodes is None:
        x_nodes = default_x_nodes(box, cells, n_x)
    return propagate(coeffs, ("points", np.asarray(x_nodes, float)), s, t_nodes, box, cells, cfg)


def _heat_kernel_2d(coeffs, cfg, s, t_nodes, x_nodes, box, cells):
    """Single-window series in d = 2 with midpoint z quadrature (coarse grids only)."""
    n = int(cells)
    lo, hi = float(box[0]), float(box[1])
    h = (hi - lo) / n
    ax = lo + (np.arange(n) + 0.5) * h
    X, Y = np.meshgrid(ax, ax, indexing="ij")
    z = np.stack([X.ravel(), Y.ravel()], -1)
    if x_nodes is None:
        sel = ax[(ax > 0.75 * lo + 0.25 * hi) & (ax < 0.25 * lo + 0.75 * hi)][::max(1, n // 16)]
        gx, gy = np.meshgrid(sel, sel, indexing="ij")
        x_nodes = np.stack([gx.ravel(), gy.ravel()], -1)
    x_nodes = np.asarray(x_nodes, float).reshape(-1, 2)
    cell_var = h * h / 12.0

    def A_of(tau, t, pts):
        return _A_integral(coeffs, tau, t, pts)

    def gauss_rows(x, tau, pts):
        # frozen Gaussian from x at time s to pts at tau, smoothed by one cell
        A2 = 2.0 * A_of(s, tau, pts) + cell_var * np.eye(2)
        inv = np.linalg.inv(A2)
        det = np.linalg.det(A2)
        v = x[:, None, :] - pts[None, :, :]
        qf = np.einsum("xni,nij,xnj->xn", v, inv, v)
        return np.exp(-0.5 * qf) / (2.0 * math.pi * np.sqrt(det))[None, :]

    def phi_matrix(tau, t):
        A2 = 2.0 * A_of(tau, t, z)
        inv = np.linalg.inv(A2)
        det = np.linalg.det(A2)
        v = z[:, None, :] - z[None, :, :]                       # (m: z, l: y)
        w = np.einsum("lij,mlj->mli", inv, v)
        G = np.exp(-0.5 * (v * w).sum(-1)) / (2.0 * math.pi * np.sqrt(det))[None, :]
        az = coeffs.a(np.full(len(z), tau), z)
        bz = coeffs.b(np.full(len(z), tau), z)
        da = az[:, None] - az[None, :]
        hess = np.einsum("mli,mlj->mlij", w, w) - inv[None]
        val = np.einsum("mlij,mlij->ml", da, hess) - np.einsum("mi,mli->ml", bz, w)
        return val * G * h * h

    t_nodes = np.asarray(t_nodes, float)
    J = cfg.tau_global
    glob = s + (t_nodes[-1] - s) * (np.arange(1, J + 1) / J) ** 2
    nodes = np.unique(np.concatenate([glob, t_nodes]))
    N = cfg.N_trunc
    store = [None] + [np.zeros((len(nodes), len(x_nodes), len(z))) for _ in range(N)]
    zero_phi = coeffs.a_space_constant and not coeffs.has_drift
    for k, t in enumerate(nodes):
        if zero_phi:
            break
        taus, wts = _tau_rule(s, t, coeffs.alpha, cfg.tau_panels, cfg.tau_nodes)
        Ws = [phi_matrix(tau, t) for tau in taus]
        r0 = [gauss_rows(x_nodes, tau, z) * h * h / (h * h) for tau in taus]
        for nn in range(1, N + 1):
            acc = 0.0
            for j, (tau, w) in enumerate(zip(taus, wts)):
                rows = r0[j] if nn == 1 else _interp_u(store[nn - 1][:k + 1], nodes[:k + 1], s, tau)
                acc = acc + w * (rows @ Ws[j])
            store[nn][k] = acc
    idx = np.searchsorted(nodes, t_nodes)
    out = np.zeros((len(x_nodes), len(t_nodes), len(z)))
    sups = [0.0] + [float(np.abs(store[nn][idx]).max()) for nn in range(1, N + 1)]
    for i, t in enumerate(t_nodes):
        A = _A_integral(coeffs, s, t, z)
        inv = np.linalg.inv(A)
        det = np.linalg.det(A)
        v = x_nodes[:, None, :] - z[None, :, :]
        qf = np.einsum("xni,nij,xnj->xn", v, inv, v)
        p0 = np.exp(-0.25 * qf) / np.sqrt((4.0 * math.pi) ** 2 * det)[None, :]
        sups[0] = max(sups[0], float(p0.max()))
        out[:, i, :] = p0 + sum(store[nn][idx[i]] for nn in range(1, N + 1))
    ratio = _term_ratio(sups)
    neg = float(-min(out.min(), 0.0))
    out = np.clip(out, 0.0, None)
    mass = out.sum(-1) * h * h
    meta = {"config": cfg.to_dict(), "term_sup": [sups], "term_ratio": ratio,
            "tail_estimate": sups[-1] * ratio / (1 - ratio) if ratio < 1 else math.inf,
            "T_window": t_nodes[-1] - s, "windows": 1, "clip_max": neg,
            "mass_defect": float(np.abs(mass - 1).max()), "rows": "points"}
    return KernelGrid(s, t_nodes, x_nodes, ((lo, lo), (hi, hi), (n, n)), out, meta)


def heat_kernel_exact(a, s, t_nodes, x_nodes, box, cells):
    """Closed-form Gaussian kernel for constant scalar a, b = 0, d = 1."""
    g = _Grid1D(box[0], box[1], cells)
    vals = np.stack([_gauss_point(np.asarray(x_nodes, float), g.z, np.full(cells, 2 * a * (t - s)))
                     for t in t_nodes], 1)
    return KernelGrid(s, np.asarray(t_nodes, float), np.asarray(x_nodes, float)[:, None],
                      (g.lo, g.hi, cells), vals, {"exact": True})


# ---------------------------------------------------------------------------
# Space-time convolution and Chapman-Kolmogorov composition.

def spacetime_convolve(p, q, t_out=None, config=None):
    """(p (x) q)(s,x;t,y) = int_s^t int p(s,x;tau,z) q(tau,z;t,y) dz dtau (d = 1).

    ``q`` is a ResidualOp (exact hat-function weights, singular as
    (t-tau)^(alpha/2-1)) or a callable q(tau, z, t, y) on broadcast arrays,
    integrated with midpoint weights in z.  A callable singular like
    (t-tau)^(alpha/2-1) declares it through an ``alpha`` attribute; without
    one it is treated as smooth.  ``p`` must provide rows_at(tau) (kernels
    built by this module do).
    """
    cfg = config or SeriesConfig()
    lo, hi, cells = p.y_box[0], p.y_box[1], p.y_box[2]
    g = _Grid1D(lo, hi, cells)
    t_out = np.asarray(p.t_nodes if t_out is None else t_out, float)
    s = p.s
    alpha = float(getattr(q, "alpha", 2.0))
    if isinstance(q, ResidualOp):
        alpha = min(c.alpha for _, _, c, _ in q.terms)
    rules = [_tau_rule(s, t, alpha, cfg.tau_panels, cfg.tau_nodes) for t in t_out]
    if isinstance(q, ResidualOp):
        q.prepare(g, np.concatenate([[s], t_out] + [r[0] for r in rules]))
        sing = []
        for _, _, c, _ in q.terms:
            sing.extend(c.singular_points)
        zb = _avoid_nodes(g.z, g.h, sing)
    nr = p.values.shape[0]
    out = np.zeros((nr, len(t_out), cells))
    for k, t in enumerate(t_out):
        taus, wts = rules[k]
        acc = np.zeros((nr, cells))
        for tau, w in zip(taus, wts):
            if isinstance(q, ResidualOp):
                W = q.weights(g, tau, t, zb)
                if W is None:
                    continue
            else:
                W = np.asarray(q(tau, g.z[:, None], t, g.z[None, :]), float) * g.h
                if not np.any(W):
                    continue
            acc += w * (p.rows_at(tau) @ W)
        out[:, k, :] = acc
    return KernelGrid(s, t_out, p.x_nodes, p.y_box, out, {"convolution": True})


def compose_kernels(p1, p2):
    """Discrete Chapman-Kolmogorov: sum_z p1(s,x;tau,z) p2(tau,z;t,y) h, where
    p1 is sampled at its last time node and p2 starts at that time with
    x_nodes equal to the y grid."""
    if len(p2.x_nodes) != p1.values.shape[-1]:
        raise DomainError("p2 must start from every y node of p1")
    left = p1.values[:, -1, :]
    vals = np.einsum("xz,zty->xty", left, p2.values) * p1.h
    return KernelGrid(p1.s, p2.t_nodes, p1.x_nodes, p2.y_box, vals, {"composed": True})


# ---------------------------------------------------------------------------
# Certifiers.

def _geometry(kernel):
    x = np.asarray(kernel.x_nodes, float).reshape(len(kernel.x_nodes), -1)
    y = np.asarray(kernel.y_nodes).reshape(-1, x.shape[1])
    dt = np.asarray(kernel.t_nodes, float) - kernel.s
    r2 = ((x[:, None, :] - y[None, :, :]) ** 2).sum(-1)        # (nx, ny)
    return x, y, dt, r2


def verify_two_sided(kernel, r2max=16.0, lam_max=20.0):
    """Fit Gaussian envelopes C^{-1} rho_{rate_lower} <= p <= C rho_{rate_upper}
    over the window (x - y)^2 / (t - s) <= r2max.

    rate_upper is the largest rate whose upper constant is at most twice the
    best achievable one, rate_lower the smallest rate with the same property
    for the lower bound.  C is the larger of the two constants.
    """
    from scipy.optimize import brentq
    x, y, dt, r2 = _geometry(kernel)
    d = x.shape[1]
    P = kernel.values                                          # (nx, nt, ny)
    R = r2[:, None, :] / dt[None, :, None]
    mask = R <= r2max
    if not np.any(mask):
        raise NoEnvelope("certification window is empty")
    pv = P[mask]
    if np.any(pv <= 0) or not np.all(np.isfinite(pv)):
        raise NoEnvelope("kernel vanishes inside the certification window")
    logp = np.log(pv)
    Rv = R[mask]
    logdt = np.broadcast_to(np.log(dt)[None, :, None], P.shape)[mask]
    base = logp + 0.5 * d * logdt                              # log(p / rho_0)

    def log_cu(lam):
        return float(np.max(base + lam * Rv))

    def log_cl(lam):
        return float(np.max(-base - lam * Rv))

    cu_min = log_cu(0.0)
    cl_min = log_cl(lam_max)
    thr = math.log(2.0)
    f_u = lambda lam: log_cu(lam) - cu_min - thr
    f_l = lambda lam: log_cl(lam) - cl_min - thr
    rate_u = brentq(f_u, 0.0, lam_max) if f_u(lam_max) > 0 else lam_max
    rate_l = brentq(f_l, 0.0, lam_max) if f_l(0.0) > 0 else 0.0
    C = math.exp(max(log_cu(rate_u), log_cl(rate_l)))
    if not np.isfinite(C):
        raise NoEnvelope("no finite envelope constant")
    return CertReport("two_sided", C, (), {
        "rate_upper": rate_u, "rate_lower": rate_l,
        "lambda_upper": rate_u, "lambda_lower": 1.0 / rate_l if rate_l > 0 else math.inf,
        "C": C, "C_upper": math.exp(log_cu(rate_u)), "C_lower": math.exp(log_cl(rate_l)),
        "r2max": r2max, "n_points": int(mask.sum())})


def verify_holder(kernel, axis, gamma, lam=None, alpha=None, gamma0=None, r2max=16.0):
    """max over grid pairs of |Delta p| / (increment^gamma * sum_i rho_{lam,-gamma}),
    restricted to pairs with (x - y)^2 / (t - s) <= r2max at one of the two points."""
    alpha = kernel.meta.get("alpha", 1.0) if alpha is None else alpha
    gamma0 = kernel.meta.get("gamma0", 1.0) if gamma0 is None else gamma0
    if not (0 < gamma < min(alpha, gamma0)):
        raise DomainError("gamma must lie in (0, min(alpha, gamma0))", gamma=gamma)
    lam = kernel.meta.get("config", {}).get("lam_report", 0.25) if lam is None else lam
    x, y, dt, r2 = _geometry(kernel)
    d = x.shape[1]
    P = kernel.values
    best, worst = 0.0, ()

    def rho_(t, rr):
        return t ** ((-d - gamma) / 2.0) * np.exp(-lam * rr / t)

    if axis == "time":
        for i in range(len(dt)):
            for j in range(i + 1, len(dt)):
                dp = np.abs(P[:, j, :] - P[:, i, :])
                den = (dt[j] - dt[i]) ** (gamma / 2.0) * (rho_(dt[i], r2) + rho_(dt[j], r2))
                ratio = np.where(r2 / dt[j] <= r2max, dp / den, 0.0)
                k = np.unravel_index(np.argmax(ratio), ratio.shape)
                if ratio[k] > best:
                    best, worst = float(ratio[k]), (float(dt[i]), float(dt[j]), int(k[0]), int(k[1]))
    elif axis == "space":
        ny = y.shape[0]
        for i in range(ny):
            dy = np.sqrt(((y[i + 1:] - y[i]) ** 2).sum(-1))
            if len(dy) == 0:
                continue
            for k, t in enumerate(dt):
                dp = np.abs(P[:, k, i + 1:] - P[:, k, i][:, None])
                den = dy[None, :] ** gamma * (rho_(t, r2[:, i])[:, None] + rho_(t, r2[:, i + 1:]))
                inside = np.minimum(r2[:, i][:, None], r2[:, i + 1:]) / t <= r2max
                ratio = np.where(inside, dp / den, 0.0)
                m = np.unravel_index(np.argmax(ratio), ratio.shape)
                if ratio[m] > best:
                    best, worst = float(ratio[m]), (float(t), i, i + 1 + int(m[1]), int(m[0]))
    else:
        raise DomainError("axis must be 'time' or 'space'")
    return CertReport(f"holder_{axis}", best, worst, {"gamma": gamma, "lam": lam})


def _lr_norm_inf_r(f_diff, r, T=1.0, box=(-4.0, 4.0), n_t=33, n_x=161):
    """||f||_{L^inf_r}-type localized norm of a scalar time-space field (sup in
    space over the box, L^r in time; r = inf gives the plain sup)."""
    t = np.linspace(0.0, T, n_t)
    xs = np.linspace(box[0], box[1], n_x)
    vals = np.array([np.abs(f_diff(np.full(n_x, tk), xs)).max() for tk in t])
    if r == math.inf:
        return float(vals.max())
    from scipy.integrate import trapezoid
    return float(trapezoid(vals ** r, t) ** (1.0 / r))


def kernel_stability(coeffs, coeffs2, config=None, r=math.inf, eta=0.15, lam=None,
                     box=(-4.0, 4.0), cells=64, t_nodes=None, x_nodes=None, r2max=16.0):
    """sup |p - p~| / rho_{lam,-2/r} against delta_a^(1-eta) + delta_b.

    The sup runs over the window (x - y)^2 / (t - s) <= r2max, where the
    kernels are resolved above rounding.
    """
    cfg = config or SeriesConfig()
    gamma0 = 1.0 - (0 if coeffs.p == math.inf else coeffs.d / coeffs.p) - \
        (0 if coeffs.q == math.inf else 2.0 / coeffs.q)
    if r != math.inf and r <= 2.0 / gamma0:
        raise DomainError("need r > 2/gamma0")
    lo_eta = 0.0 if r == math.inf else 2.0 / (2.0 + coeffs.alpha * r)
    if not (lo_eta < eta < 1.0):
        raise DomainError("eta outside (2/(2+alpha r), 1)")
    lam = cfg.lam_report if lam is None else lam
    k1 = heat_kernel(coeffs, cfg, t_nodes=t_nodes, x_nodes=x_nodes, box=box, cells=cells)
    k2 = heat_kernel(coeffs2, cfg, t_nodes=t_nodes, x_nodes=x_nodes, box=box, cells=cells)
    x, y, dt, r2 = _geometry(k1)
    gam = 0.0 if r == math.inf else -2.0 / r
    rho_ = dt[None, :, None] ** ((-1 + gam) / 2.0) * np.exp(-lam * r2[:, None, :] / dt[None, :, None])
    inside = r2[:, None, :] <= r2max * dt[None, :, None]
    lhs = float(np.where(inside, np.abs(k1.values - k2.values) / np.where(inside, rho_, 1.0),
                         0.0).max())
    da = _lr_norm_inf_r(lambda t, z: coeffs.a1(t, z) - coeffs2.a1(t, z), r, box=box)
    if coeffs.has_drift or coeffs2.has_drift:
        diff = SpaceTimeField(lambda t, z: coeffs.b(t, z)[:, 0] - coeffs2.b(t, z)[:, 0], 1,
                              None, tuple(coeffs.singular_points) + tuple(coeffs2.singular_points))
        db = lpq_norm(diff, coeffs.p if coeffs.p < math.inf else 4.0,
                      coeffs.q if coeffs.q < math.inf else math.inf, 1.0)
    else:
        db = 0.0
    rhs = da ** (1.0 - eta) + db
    ratio = lhs / rhs if rhs > 0 else (0.0 if lhs == 0 else math.inf)
    return CertReport("stability", ratio, (), {"lhs_sup": lhs, "rhs": rhs, "delta_a": da,
                                               "delta_b": db, "r": r, "eta": eta})


def _random_spd(rng, n, d, lo, hi):
    Q, _ = np.linalg.qr(rng.standard_normal((n, d, d)))
    ev = rng.uniform(lo, hi, (n, d))
    return np.einsum("nij,nj,nkj->nik", Q, ev, Q)


def det_perturbation_check(d=2, Lam=4.0, a=1.0, n_samples=10_000, seed=0, C=None):
    """Check |det A - det A~| <= C a^(d-1) |A - A~| and
    |det(A + B) - det A| <= C a^(d-1) b on random SPD draws (Frobenius norm).

    The default C = d 2^(d-1) Lam^d follows from the mean value theorem
    (adjugate bound); the fitted constant is reported separately.
    """
    rng = np.random.default_rng(seed)
    C = d * 2.0 ** (d - 1) * Lam ** d if C is None else C
    A = _random_spd(rng, n_samples, d, a / Lam, a * Lam)
    At = _random_spd(rng, n_samples, d, a / Lam, a * Lam)
    bb = a * rng.uniform(0.0, 1.0, n_samples)
    B = _random_spd(rng, n_samples, d, 1.0 / Lam, Lam) * bb[:, None, None]
    dA = np.abs(np.linalg.det(A) - np.linalg.det(At))
    nA = np.linalg.norm(A - At, axis=(1, 2))
    r1 = np.where(nA > 0, dA / (a ** (d - 1) * np.where(nA > 0, nA, 1.0)), 0.0)
    dB = np.abs(np.linalg.det(A + B) - np.linalg.det(A))
    r2 = np.where(bb > 0, dB / (a ** (d - 1) * np.where(bb > 0, bb, 1.0)), 0.0)
    fitted = float(max(r1.max(), r2.max()))
    viol = int((r1 > C * (1 + 1e-12)).sum() + (r2 > C * (1 + 1e-12)).sum())
    return PropertyReport("det_perturbation", 2 * n_samples, viol, 0.0, fitted,
                          {"d": d, "Lam": Lam, "a": a, "C_bound": C,
                           "fitted_C_diff": float(r1.max()), "fitted_C_sum": float(r2.max())})
