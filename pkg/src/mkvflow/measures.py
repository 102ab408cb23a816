"""Signed measures, measure flows, weighted norms and distances.

A :class:`Measure` is either a list of weighted atoms or a piecewise-constant
density on a tensor grid.  A :class:`MeasureFlow` is a time-indexed list of
measures on (0, 1].  Distances between flows use the dyadically weighted
curve metric ``d_phi``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .errors import GridMismatch, InvalidMeasure, MassLoss, NotProbability

MASS_TOL = 1e-2


class WeightKind(enum.Enum):
    CONSTANT_ONE = "constant-one"
    POLYNOMIAL = "polynomial"
    EXPONENTIAL = "exponential"


@dataclass(frozen=True)
class WeightFunction:
    """Radial weight phi >= 1: 1, 1 + |x|^p, or exp(sqrt(1 + |x|^2))."""
    kind: WeightKind = WeightKind.CONSTANT_ONE
    p: float = 0.0

    @classmethod
    def one(cls):
        return cls(WeightKind.CONSTANT_ONE)

    @classmethod
    def polynomial(cls, p):
        if p <= 0:
            raise ValueError("polynomial weight needs p > 0")
        return cls(WeightKind.POLYNOMIAL, float(p))

    @classmethod
    def exponential(cls):
        return cls(WeightKind.EXPONENTIAL)

    def eval(self, x):
        r = _radius(x)
        if self.kind is WeightKind.CONSTANT_ONE:
            return np.ones_like(r)
        if self.kind is WeightKind.POLYNOMIAL:
            return 1.0 + r ** self.p
        with np.errstate(over="ignore"):  # inf is the honest value far out
            return np.exp(np.hypot(1.0, r))

    __call__ = eval

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 0:
            x = x[None]
        r = _radius(x)
        safe = np.where(r > 0, r, 1.0)
        if self.kind is WeightKind.CONSTANT_ONE:
            dr = np.zeros_like(r)
        elif self.kind is WeightKind.POLYNOMIAL:
            dr = self.p * safe ** (self.p - 1.0)
            dr = np.where(r > 0, dr, 0.0 if self.p >= 1 else np.inf)
        else:
            dr = np.exp(np.sqrt(1.0 + r * r)) * r / np.sqrt(1.0 + r * r)
        return (dr / safe)[..., None] * x if x.ndim > 1 else dr * np.sign(x)

    def check_weight_condition(self, lam=0.25, d=1, t_samples=None, x_samples=None,
                               h_samples=None, n_quad=64):
        """Fitted C in  int (phi + |grad phi|)(x-h-y) rho_lam(t,y) dy <= C phi(x).

        Returns the maximum ratio over the sampled (t, x, h); d = 1 only.
        """
        if d != 1:
            raise ValueError("weight condition check implemented for d = 1")
        t_samples = np.linspace(0.05, 1.0, 8) if t_samples is None else np.asarray(t_samples)
        x_samples = np.linspace(-10, 10, 41) if x_samples is None else np.asarray(x_samples)
        h_samples = np.array([-1.0, 0.0, 1.0]) if h_samples is None else np.asarray(h_samples)
        gh_x, gh_w = np.polynomial.hermite.hermgauss(n_quad)
        worst = 0.0
        for t in t_samples:
            # rho_lam(t, y) = t^{-1/2} exp(-lam y^2/t); substitute y = sqrt(t/lam) u
            y = np.sqrt(t / lam) * gh_x
            wy = gh_w * np.sqrt(t / lam) * t ** -0.5
            for x in x_samples:
                for h in h_samples:
                    pts = x - h - y
                    g = self.eval(pts) + np.abs(self.grad(pts))
                    val = float(np.sum(wy * g))
                    worst = max(worst, val / float(self.eval(np.array([x]))[0]))
        return worst

    def to_dict(self):
        return {"kind": self.kind.value, "p": self.p}

    @classmethod
    def from_dict(cls, d):
        return cls(WeightKind(d.get("kind", "constant-one")), float(d.get("p", 0.0)))


def _radius(x):
    x = np.asarray(x, dtype=float)
    if x.ndim <= 1:
        return np.abs(x)
    if x.shape[-1] == 1:
        return np.abs(x[..., 0])
    return np.hypot.reduce(x, axis=-1)


class Measure:
    """Signed measure as atoms or as a grid density.

    Grid values are densities (mass per unit volume) stored with shape
    ``cells`` (row-major, one axis per dimension).
    """
    __slots__ = ("kind", "dim", "points", "weights", "lo", "hi", "cells", "values")

    def __init__(self, kind, dim, points=None, weights=None, lo=None, hi=None,
                 cells=None, values=None):
        self.kind = kind
        self.dim = int(dim)
        self.points = points
        self.weights = weights
        self.lo = lo
        self.hi = hi
        self.cells = cells
        self.values = values

    @classmethod
    def atoms(cls, points, weights=None):
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        n = pts.shape[0]
        w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=float).reshape(n)
        if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(w))):
            raise InvalidMeasure("non-finite atom")
        return cls("atoms", pts.shape[1], points=pts, weights=w)

    @classmethod
    def grid(cls, lo, hi, cells, values):
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        cells = tuple(int(c) for c in np.atleast_1d(cells))
        vals = np.asarray(values, dtype=float).reshape(cells)
        if not np.all(np.isfinite(vals)):
            raise InvalidMeasure("non-finite grid value")
        if np.any(hi <= lo):
            raise InvalidMeasure("empty box")
        return cls("grid", len(cells), lo=lo, hi=hi, cells=cells, values=vals)

    @classmethod
    def dirac(cls, x):
        return cls.atoms(np.atleast_2d(np.asarray(x, dtype=float)), [1.0])

    @classmethod
    def zero(cls, dim=1):
        return cls("atoms", dim, points=np.zeros((0, dim)), weights=np.zeros(0))

    # -- grid geometry -----------------------------------------------------
    @property
    def h(self):
        return (self.hi - self.lo) / np.asarray(self.cells)

    @property
    def cell_volume(self):
        return float(np.prod(self.h))

    def axes(self):
        """Cell centers per axis."""
        return [self.lo[k] + (np.arange(self.cells[k]) + 0.5) * self.h[k] for k in range(self.dim)]

    def edges(self):
        return [np.linspace(self.lo[k], self.hi[k], self.cells[k] + 1) for k in range(self.dim)]

    def centers(self):
        """Cell centers as an (n_cells, d) array in row-major order."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def same_grid(self, other):
        return (self.kind == other.kind == "grid" and self.cells == other.cells
                and np.allclose(self.lo, other.lo, rtol=0, atol=1e-12)
                and np.allclose(self.hi, other.hi, rtol=0, atol=1e-12))

    # -- basic quantities --------------------------------------------------
    def support_points(self):
        """(points, masses) pairs: atoms, or cell centers with cell masses."""
        if self.kind == "atoms":
            return self.points, self.weights
        return self.centers(), self.values.ravel() * self.cell_volume

    def mass(self):
        return float(np.sum(self.support_points()[1]))

    def abs_mass(self):
        return float(np.sum(np.abs(self.support_points()[1])))

    def is_probability(self, tol=MASS_TOL):
        w = self.support_points()[1]
        return bool(np.all(w >= -1e-14) and abs(w.sum() - 1.0) <= tol)

    def pair(self, g):
        """<g, m> for a function g of points (n, d) -> (n,) or (n, k)."""
        pts, w = self.support_points()
        if len(w) == 0:
            return 0.0
        vals = np.asarray(g(pts), dtype=float)
        return np.tensordot(w, vals, axes=(0, 0))

    def mean(self):
        pts, w = self.support_points()
        return (w[:, None] * pts).sum(0) / w.sum()

    def variance(self):
        pts, w = self.support_points()
        mu = (w[:, None] * pts).sum(0) / w.sum()
        return ((w[:, None] * (pts - mu) ** 2).sum(0) / w.sum())

    # -- arithmetic --------------------------------------------------------
    def scaled(self, c):
        if self.kind == "atoms":
            return Measure("atoms", self.dim, points=self.points, weights=c * self.weights)
        return Measure("grid", self.dim, lo=self.lo, hi=self.hi, cells=self.cells, values=c * self.values)

    def __mul__(self, c):
        return self.scaled(float(c))

    __rmul__ = __mul__

    def __neg__(self):
        return self.scaled(-1.0)

    def __add__(self, other):
        if self.kind == "grid" and other.kind == "grid":
            if not self.same_grid(other):
                raise GridMismatch("grids differ; rebin first")
            return Measure("grid", self.dim, lo=self.lo, hi=self.hi, cells=self.cells,
                           values=self.values + other.values)
        if self.kind == "atoms" and other.kind == "atoms":
            return Measure("atoms", self.dim, points=np.concatenate([self.points, other.points]),
                           weights=np.concatenate([self.weights, other.weights]))
        raise GridMismatch("cannot add atoms and grid; rebin first")

    def __sub__(self, other):
        return self + (-other)

    def merged(self):
        """Atoms with coincident points combined (exact coordinate equality)."""
        if self.kind != "atoms" or len(self.weights) == 0:
            return self
        uniq, inv = np.unique(self.points, axis=0, return_inverse=True)
        w = np.zeros(len(uniq))
        np.add.at(w, inv.ravel(), self.weights)
        return Measure("atoms", self.dim, points=uniq, weights=w)

    def to_dict(self):
        if self.kind == "atoms":
            return {"kind": "atoms", "points": self.points.tolist(), "weights": self.weights.tolist()}
        return {"kind": "grid", "lo": self.lo.tolist(), "hi": self.hi.tolist(),
                "cells": list(self.cells), "values": self.values.ravel().tolist()}

    def __repr__(self):
        if self.kind == "atoms":
            return f"Measure(atoms, n={len(self.weights)}, d={self.dim})"
        return f"Measure(grid, cells={self.cells}, box={self.lo.tolist()}..{self.hi.tolist()})"


def gaussian_grid(mean, var, lo, hi, cells):
    """Exact cell averages of N(mean, var * I) on a box (d = 1 or 2)."""
    lo = np.atleast_1d(np.asarray(lo, float))
    hi = np.atleast_1d(np.asarray(hi, float))
    cells = tuple(int(c) for c in np.atleast_1d(cells))
    mean = np.broadcast_to(np.atleast_1d(np.asarray(mean, float)), lo.shape)
    sd = math.sqrt(var)
    factors = []
    for k in range(len(cells)):
        e = np.linspace(lo[k], hi[k], cells[k] + 1)
        c = ndtr((e - mean[k]) / sd)
        factors.append(np.diff(c) / np.diff(e))
    vals = factors[0]
    for f in factors[1:]:
        vals = np.multiply.outer(vals, f)
    return Measure.grid(lo, hi, cells, vals)


def density_grid(fn, lo, hi, cells, sub=4):
    """Cell averages of a density function by Gauss-Legendre sub-sampling."""
    lo = np.atleast_1d(np.asarray(lo, float))
    hi = np.atleast_1d(np.asarray(hi, float))
    cells = tuple(int(c) for c in np.atleast_1d(cells))
    gx, gw = np.polynomial.legendre.leggauss(sub)
    axes_pts, axes_w = [], []
    for k in range(len(cells)):
        e = np.linspace(lo[k], hi[k], cells[k] + 1)
        mid = 0.5 * (e[1:] + e[:-1])
        half = 0.5 * np.diff(e)
        axes_pts.append((mid[:, None] + half[:, None] * gx[None, :]))
        axes_w.append(np.broadcast_to(0.5 * gw, (cells[k], sub)))
    if len(cells) == 1:
        v = fn(axes_pts[0].reshape(-1, 1)).reshape(cells[0], sub)
        return Measure.grid(lo, hi, cells, (v * axes_w[0]).sum(1))
    px = axes_pts[0].reshape(-1)
    py = axes_pts[1].reshape(-1)
    X, Y = np.meshgrid(px, py, indexing="ij")
    v = fn(np.stack([X.ravel(), Y.ravel()], -1)).reshape(cells[0], sub, cells[1], sub)
    v = np.einsum("aibj,ai,bj->ab", v, axes_w[0], axes_w[1])
    return Measure.grid(lo, hi, cells, v)


# ---------------------------------------------------------------------------
# Norms and distances.

def _check_finite(m):
    _, w = m.support_points()
    if not np.all(np.isfinite(w)):
        raise InvalidMeasure("non-finite values")
    if m.kind == "atoms" and not np.all(np.isfinite(m.points)):
        raise InvalidMeasure("non-finite atom locations")


def phi_norm(m, phi=None):
    """<phi, |m|>: atom sum, or cell-sum quadrature for grids."""
    phi = phi or WeightFunction.one()
    _check_finite(m)
    if m.kind == "atoms":
        m = m.merged()
    pts, w = m.support_points()
    if len(w) == 0:
        return 0.0
    return float(np.sum(np.abs(w) * phi.eval(pts)))


def tv_distance(m, m2):
    """Total variation ||m - m2|| (full L1 mass of the difference)."""
    if m.dim != m2.dim:
        raise GridMismatch("dimension mismatch")
    if m.kind != m2.kind:
        raise GridMismatch("mixed representations; rebin first")
    if m.kind == "grid" and not m.same_grid(m2):
        raise GridMismatch("grids differ; rebin first")
    _check_finite(m)
    _check_finite(m2)
    return phi_norm(m - m2)


def _cdf_breaks_1d(m):
    """Breakpoints and CDF values (piecewise linear between them)."""
    if m.kind == "atoms":
        mm = m.merged()
        x = mm.points[:, 0]
        order = np.argsort(x)
        x = x[order]
        c = np.cumsum(mm.weights[order])
        return x, c, True
    e = m.edges()[0]
    c = np.concatenate(([0.0], np.cumsum(m.values * m.cell_volume)))
    return e, c, False


def _cdf_eval(breaks, vals, step, pts):
    if step:
        idx = np.searchsorted(breaks, pts, side="right")
        return np.concatenate(([0.0], vals))[idx]
    return np.interp(pts, breaks, vals, left=0.0, right=vals[-1])


def _cdf_on_interval(breaks, vals, step, left, right):
    """CDF at both ends of each interval; step CDFs are constant inside."""
    if step:
        v = _cdf_eval(breaks, vals, True, left)
        return v, v
    return _cdf_eval(breaks, vals, False, left), _cdf_eval(breaks, vals, False, right)


def wasserstein1(m, m2):
    """W1 distance between probability measures.

    d = 1 integrates |F - G| exactly for atoms and piecewise-linear CDFs.
    d >= 2 requires atoms and solves the discrete transport problem.
    """
    for mm in (m, m2):
        _check_finite(mm)
        if not mm.is_probability():
            raise NotProbability("W1 needs probability measures")
    if m.dim != m2.dim:
        raise GridMismatch("dimension mismatch")
    if m.dim == 1:
        b1, c1, s1 = _cdf_breaks_1d(m)
        b2, c2, s2 = _cdf_breaks_1d(m2)
        pts = np.unique(np.concatenate([b1, b2]))
        if len(pts) < 2:
            return 0.0
        left = pts[:-1]
        right = pts[1:]
        f_l, f_r = _cdf_on_interval(b1, c1, s1, left, right)
        g_l, g_r = _cdf_on_interval(b2, c2, s2, left, right)
        d_l = f_l - g_l
        d_r = f_r - g_r
        width = right - left
        same = d_l * d_r >= 0
        area_same = 0.5 * width * (np.abs(d_l) + np.abs(d_r))
        denom = np.where(same, 1.0, np.abs(d_l) + np.abs(d_r))
        area_cross = 0.5 * width * (d_l ** 2 + d_r ** 2) / denom
        return float(np.sum(np.where(same, area_same, area_cross)))
    if m.kind != "atoms" or m2.kind != "atoms":
        raise GridMismatch("W1 in d >= 2 is implemented for atoms only")
    from scipy.optimize import linprog
    a = m.merged()
    b = m2.merged()
    cost = np.sqrt(((a.points[:, None, :] - b.points[None, :, :]) ** 2).sum(-1))
    na, nb = cost.shape
    A_eq = np.zeros((na + nb, na * nb))
    for i in range(na):
        A_eq[i, i * nb:(i + 1) * nb] = 1.0
    for j in range(nb):
        A_eq[na + j, j::nb] = 1.0
    rhs = np.concatenate([a.weights, b.weights])
    res = linprog(cost.ravel(), A_eq=A_eq[:-1], b_eq=rhs[:-1], bounds=(0, None), method="highs")
    return float(res.fun)


def rebin(m, lo, hi, cells, mass_tol=MASS_TOL):
    """Conservative transfer onto a new grid (histogram for atoms)."""
    lo = np.atleast_1d(np.asarray(lo, float))
    hi = np.atleast_1d(np.asarray(hi, float))
    cells = tuple(int(c) for c in np.atleast_1d(cells))
    if len(cells) != m.dim:
        raise GridMismatch("dimension mismatch")
    total = m.abs_mass()
    target = Measure.grid(lo, hi, cells, np.zeros(cells))
    if m.kind == "grid" and m.same_grid(target):
        return Measure.grid(lo, hi, cells, m.values.copy())
    if m.kind == "atoms":
        edges = target.edges()
        inside = np.all((m.points >= lo) & (m.points <= hi), axis=1)
        lost = float(np.abs(m.weights[~inside]).sum())
        if total > 0 and lost > mass_tol * total:
            raise MassLoss("atoms outside the target box", lost=lost)
        hist, _ = np.histogramdd(m.points[inside], bins=edges, weights=m.weights[inside])
        return Measure.grid(lo, hi, cells, hist / target.cell_volume)
    mats = []
    for k in range(m.dim):
        es = m.edges()[k]
        et = target.edges()[k]
        ov = np.clip(np.minimum(es[None, 1:], et[1:, None]) - np.maximum(es[None, :-1], et[:-1, None]), 0.0, None)
        mats.append(ov / np.diff(es)[None, :])
    masses = m.values * m.cell_volume
    out = masses
    for k, M in enumerate(mats):
        out = np.moveaxis(np.tensordot(M, np.moveaxis(out, k, 0), axes=(1, 0)), 0, k)
    lost = abs(float(np.abs(masses).sum()) - float(np.abs(out).sum()))
    if total > 0 and lost > mass_tol * total:
        raise MassLoss("grid mass outside the target box", lost=lost)
    return Measure.grid(lo, hi, cells, out / target.cell_volume)


# ---------------------------------------------------------------------------
# Flows.

class MeasureFlow:
    """Measures on a strictly increasing time grid in (0, 1]."""

    def __init__(self, times, measures, weight=None, s_phi=False):
        times = np.asarray(times, dtype=float)
        if times.ndim != 1 or len(times) != len(measures) or len(times) == 0:
            raise InvalidMeasure("times and measures must align")
        if np.any(np.diff(times) <= 0) or times[0] <= 0 or times[-1] > 1 + 1e-12:
            raise InvalidMeasure("flow times must increase strictly inside (0, 1]")
        kinds = {m.kind for m in measures}
        dims = {m.dim for m in measures}
        if len(kinds) != 1 or len(dims) != 1:
            raise InvalidMeasure("flow measures must share kind and dimension")
        if s_phi:
            for m in measures:
                if m.kind != "grid":
                    raise InvalidMeasure("S_phi flows need grid densities")
                if not m.is_probability():
                    raise NotProbability("S_phi flows need probability measures")
        self.times = times
        self.measures = list(measures)
        self.weight = weight or WeightFunction.one()
        self.s_phi = s_phi

    def __len__(self):
        return len(self.times)

    def __getitem__(self, k):
        return self.measures[k]

    def index_at(self, t):
        """Index of the flow node used at time t (piecewise constant from the left)."""
        k = int(np.searchsorted(self.times, t, side="right")) - 1
        return min(max(k, 0), len(self.times) - 1)

    def at(self, t):
        return self.measures[self.index_at(t)]

    def aligned(self, other):
        return len(self.times) == len(other.times) and np.allclose(self.times, other.times, rtol=0, atol=1e-12)

    def combine(self, other, w_self):
        """Pointwise mixture w_self * self + (1 - w_self) * other."""
        if not self.aligned(other):
            raise GridMismatch("flows on different time grids")
        ms = [a * w_self + b * (1.0 - w_self) for a, b in zip(self.measures, other.measures)]
        return MeasureFlow(self.times, ms, self.weight, s_phi=False)

    def stack(self):
        return np.stack([m.values for m in self.measures])


def default_times(K=32):
    """t_k = (k/K)^2, k = 1..K."""
    k = np.arange(1, K + 1)
    return (k / K) ** 2


def dphi_metric(mu, mu2, phi=None):
    """max_k 2^-k s_k/(1+s_k), s_k = sup_{t in [1/k,1]} ||mu_t - mu2_t||_phi."""
    if not mu.aligned(mu2):
        raise GridMismatch("flows on different time grids")
    phi = phi or mu.weight
    norms = np.array([phi_norm(a - b, phi) for a, b in zip(mu.measures, mu2.measures)])
    return dphi_from_norms(mu.times, norms)


def dphi_from_norms(times, norms):
    times = np.asarray(times, float)
    norms = np.asarray(norms, float)
    kmax = int(math.ceil(1.0 / times[0] - 1e-12))
    # suffix maxima: sup over nodes with t >= 1/k
    suffix = np.maximum.accumulate(norms[::-1])[::-1]
    best = 0.0
    for k in range(1, kmax + 1):
        idx = int(np.searchsorted(times, 1.0 / k - 1e-12, side="left"))
        if idx >= len(times):
            continue
        s = suffix[idx]
        val = math.ldexp(s / (1.0 + s), -k)
        if val > best:
            best = val
    return best
