"""Singular-kernel profiles, the Kato functional and localized L^p_q norms.

All quadratures are product rules: the singular profile eta_beta is
integrated exactly over radial shells while the field is sampled at shell
midpoints, and time is integrated in u = sqrt(s) so the s^(-1/2) blow-up of
the inner integral becomes bounded.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import roots_jacobi

from .errors import Divergent, DomainError, IndexSetError
from .reports import CertReport, ScalingReport

GROWTH_TOL = 0.2


# ---------------------------------------------------------------------------
# Profiles.

def _norm_last(x, d):
    x = np.asarray(x, dtype=float)
    if d is None:
        x = np.atleast_1d(x)
        return np.sqrt((x * x).sum(-1)), x.shape[-1]
    if d == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        return np.abs(x), 1
    return np.sqrt((x * x).sum(-1)), d


def eta_beta(beta, t, x, d=None):
    """(sqrt(t) + |x|)^(-d-beta).  Points are taken along the last axis of x
    unless d = 1 is passed explicitly, in which case x holds scalars."""
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise DomainError("eta_beta needs t > 0")
    r, d = _norm_last(x, d)
    out = (np.sqrt(t) + r) ** (-d - beta)
    return float(out) if np.ndim(out) == 0 else out


def rho(lam, gamma, t, x, d=None):
    """t^((-d+gamma)/2) exp(-lam |x|^2 / t)."""
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0) or lam <= 0:
        raise DomainError("rho needs t > 0 and lam > 0")
    r, d = _norm_last(x, d)
    out = t ** ((-d + gamma) / 2.0) * np.exp(-lam * r * r / t)
    return float(out) if np.ndim(out) == 0 else out


def chi(r):
    """Pinned cutoff: 1 on |x| <= 1, smooth bridge on (1, 2), 0 beyond."""
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    out[r <= 1.0] = 1.0
    mid = (r > 1.0) & (r < 2.0)
    u = r[mid] - 1.0
    out[mid] = np.exp(1.0 - 1.0 / (1.0 - u * u))
    return out


# ---------------------------------------------------------------------------
# Fields.

@dataclass
class SpaceTimeField:
    """Scalar field f(t, x) on [0, 1] x R^d, extended by zero for t outside [0, 1].

    ``fn(t, x)`` receives t with shape (n,) and x with shape (n, d).
    """
    fn: object
    d: int = 1
    support_hint: tuple | None = None
    singular_points: tuple = ()
    time_homogeneous: bool = False
    name: str = "field"
    breaks: tuple = ()          # interior jump locations (d = 1), used as panel breaks

    def eval(self, t, x):
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float).reshape(t.shape + (self.d,))
        flat_t = t.reshape(-1)
        flat_x = x.reshape(-1, self.d)
        inside = (flat_t >= 0.0) & (flat_t <= 1.0)
        out = np.zeros(flat_t.shape)
        if np.any(inside):
            out[inside] = np.asarray(self.fn(flat_t[inside], flat_x[inside]), dtype=float).reshape(-1)
        return out.reshape(t.shape)

    def abs(self):
        fn = self.fn
        return SpaceTimeField(lambda t, x: np.abs(fn(t, x)), self.d, self.support_hint,
                              self.singular_points, self.time_homogeneous, f"|{self.name}|",
                              self.breaks)

    def __add__(self, other):
        f, g = self.fn, other.fn
        hint = None
        if self.support_hint is not None and other.support_hint is not None:
            hint = (np.minimum(self.support_hint[0], other.support_hint[0]),
                    np.maximum(self.support_hint[1], other.support_hint[1]))
        return SpaceTimeField(lambda t, x: f(t, x) + g(t, x), self.d, hint,
                              tuple(self.singular_points) + tuple(other.singular_points),
                              self.time_homogeneous and other.time_homogeneous, "sum",
                              tuple(self.breaks) + tuple(other.breaks))

    def is_zero(self):
        return getattr(self, "_zero", False)

    @classmethod
    def zero(cls, d=1):
        f = cls(lambda t, x: np.zeros(len(t)), d, None, (), True, "zero")
        f._zero = True
        return f

    @classmethod
    def constant(cls, c, d=1):
        return cls(lambda t, x: np.full(len(t), float(c)), d, None, (), True, f"const({c})")

    @classmethod
    def indicator_ball(cls, radius=1.0, d=1, value=1.0):
        def fn(t, x):
            return np.where(np.sqrt((x * x).sum(-1)) < radius, value, 0.0)
        return cls(fn, d, (-radius * np.ones(d), radius * np.ones(d)), (), True, f"1_B{radius}",
                   (-radius, radius) if d == 1 else ())

    @classmethod
    def power_ball(cls, a, radius=1.0, d=1):
        """|x|^(-a) 1_{|x| < radius}."""
        def fn(t, x):
            r = np.sqrt((x * x).sum(-1))
            with np.errstate(divide="ignore"):
                return np.where(r < radius, r ** (-a), 0.0)
        return cls(fn, d, (-radius * np.ones(d), radius * np.ones(d)), (np.zeros(d),), True,
                   f"|x|^-{a} 1_B{radius}")

    @classmethod
    def power_decay(cls, a, d=1):
        """|x|^(-a) on all of R^d (singular at 0)."""
        def fn(t, x):
            r = np.sqrt((x * x).sum(-1))
            with np.errstate(divide="ignore"):
                return r ** (-a)
        return cls(fn, d, None, (np.zeros(d),), True, f"|x|^-{a}")


# ---------------------------------------------------------------------------
# Kato functional.

@dataclass
class KatoReport:
    beta: float
    T: float
    value: float
    forward_part: float
    backward_part: float
    quadrature_cells: dict = field(default_factory=dict)
    est_error: float = 0.0

    def to_dict(self):
        return {"beta": self.beta, "T": self.T, "value": self.value,
                "forward_part": self.forward_part, "backward_part": self.backward_part,
                "quadrature_cells": self.quadrature_cells, "est_error": self.est_error}


def _shell_weights(sq, r0, r1, d, beta):
    """int_{r0}^{r1} r^(d-1) (sq + r)^(-d-beta) dr, vectorized over sq (col) and shells (row)."""
    a = sq[:, None] + r0[None, :]
    b = sq[:, None] + r1[None, :]

    def prim(k, lo, hi):
        # int (c + r)^(-k) dr from lo to hi
        if abs(k - 1.0) < 1e-14:
            return np.log(hi / lo)
        return (lo ** (1.0 - k) - hi ** (1.0 - k)) / (k - 1.0)

    if d == 1:
        return prim(1.0 + beta, a, b)
    # r = (c + r) - c
    return prim(1.0 + beta, a, b) - sq[:, None] * prim(2.0 + beta, a, b)


def _shell_tail(sq, r0, d, beta):
    """Weight of the shell [r0, inf); infinite when the tail diverges."""
    a = sq + r0
    if beta <= 0:
        return np.full_like(sq, np.inf)
    if d == 1:
        return a ** (-beta) / beta
    return a ** (-beta) / beta - sq * a ** (-1.0 - beta) / (1.0 + beta)


def _radial_mesh(R, n_graded, n_uniform):
    graded = R * (np.arange(n_graded + 1) / n_graded) ** 2
    uniform = np.linspace(0.0, R, n_uniform + 1)
    return np.unique(np.concatenate([graded, uniform]))


def _directions(d, n_ang):
    if d == 1:
        return np.array([[1.0], [-1.0]]), 1.0
    th = (np.arange(n_ang) + 0.5) * 2.0 * math.pi / n_ang
    return np.stack([np.cos(th), np.sin(th)], -1), 2.0 * math.pi / n_ang


def _one_sided(f, beta, T, t0, x0, sgn, level, R, unbounded):
    """int_0^T int eta_beta(s,y) |f(t0 + sgn s, x0 + sgn y)| dy ds."""
    d = f.d
    J = 16 * 2 ** level
    n_gl = 4
    gx, gw = np.polynomial.legendre.leggauss(n_gl)
    ue = np.linspace(0.0, math.sqrt(T), J + 1)
    u = (0.5 * (ue[1:] + ue[:-1])[:, None] + 0.5 * np.diff(ue)[:, None] * gx[None, :]).ravel()
    wu = (0.5 * np.diff(ue)[:, None] * gw[None, :]).ravel()
    s = u * u
    ws = 2.0 * u * wu
    redges = _radial_mesh(R, 48 * 2 ** level, 192 * 2 ** level)
    r0, r1 = redges[:-1], redges[1:]
    rm = 0.5 * (r0 + r1)
    dirs, dir_w = _directions(d, 16 * 2 ** level)
    W = _shell_weights(u, r0, r1, d, beta) * dir_w  # (ns, nshell)
    # field samples at (t0 + sgn s, x0 + sgn r_mid * dir)
    pts = x0[None, None, :] + sgn * rm[None, :, None] * dirs[:, None, :]  # (ndir, nshell, d)
    ns, nsh, nd = len(s), len(rm), len(dirs)
    tt = np.broadcast_to((t0 + sgn * s)[:, None, None], (ns, nd, nsh))
    xx = np.broadcast_to(pts[None], (ns, nd, nsh, d))
    vals = np.abs(f.eval(tt, xx))  # (ns, ndir, nshell)
    if not np.all(np.isfinite(vals)):
        raise Divergent("field not finite at a quadrature node")
    total = float(np.sum(ws[:, None] * W * vals.sum(1)))
    if unbounded:
        tail_pts = x0[None, :] + sgn * R * dirs
        tv = np.abs(f.eval(np.broadcast_to((t0 + sgn * s)[:, None], (ns, nd)),
                           np.broadcast_to(tail_pts[None], (ns, nd, d))))
        tw = _shell_tail(u, R, d, beta) * dir_w
        contrib = ws[:, None] * tw[:, None] * tv
        if np.any(tv > 0) and not np.all(np.isfinite(tw)):
            raise Divergent("tail of eta_beta is not integrable against f")
        total += float(np.nansum(np.where(tv > 0, contrib, 0.0)))
    return total, ns * nsh * nd


def _base_lattice(f, n_space):
    d = f.d
    per_axis = max(3, int(round(n_space ** (1.0 / d))))
    if f.support_hint is None:
        lo, hi = -np.ones(d), np.ones(d)
    else:
        lo = np.asarray(f.support_hint[0], float) - 1.0
        hi = np.asarray(f.support_hint[1], float) + 1.0
    axes = [np.linspace(lo[k], hi[k], per_axis) for k in range(d)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], -1)


def _kato_level(f, beta, T, level, base_times, base_x):
    d = f.d
    unbounded = f.support_hint is None
    forward = backward = 0.0
    cells = 0
    for sgn, times in ((1.0, base_times[0]), (-1.0, base_times[1])):
        best = 0.0
        for t0 in times:
            for x0 in base_x:
                if unbounded:
                    R = 50.0
                else:
                    lo = np.asarray(f.support_hint[0], float)
                    hi = np.asarray(f.support_hint[1], float)
                    far = np.maximum(np.abs(hi - x0), np.abs(x0 - lo))
                    R = float(np.sqrt((far * far).sum())) + 1e-9
                val, nc = _one_sided(f, beta, T, t0, x0, sgn, level, R, unbounded)
                cells += nc
                best = max(best, val)
        if sgn > 0:
            forward = best
        else:
            backward = best
    return forward, backward, cells


def kato_functional(f, beta, T, d=None, base_times=None, n_space=27, n_time=9):
    """K^beta_f(T): sup over a base-point lattice of the forward and backward
    time-shifted eta_beta convolutions of |f| (each sup taken separately)."""
    if d is not None and d != f.d:
        raise DomainError("dimension mismatch")
    if not (0 < T <= 1):
        raise DomainError("T must lie in (0, 1]")
    if f.is_zero():
        return KatoReport(beta, T, 0.0, 0.0, 0.0, {"levels": 0}, 0.0)
    base_x = _base_lattice(f, n_space)
    if base_times is None:
        if f.time_homogeneous:
            base_times = (np.array([0.0]), np.array([1.0]))
        else:
            lattice = np.linspace(0.0, 1.0, n_time)
            base_times = (lattice, lattice)
    elif not isinstance(base_times, tuple):
        base_times = (np.asarray(base_times), np.asarray(base_times))
    vals = []
    levels = 0
    growth_count = 0
    while True:
        fw, bw, cells = _kato_level(f, beta, T, levels, base_times, base_x)
        vals.append((fw + bw, fw, bw, cells))
        levels += 1
        if levels < 2:
            continue
        prev, cur = vals[-2][0], vals[-1][0]
        if prev > 0 and cur > (1.0 + GROWTH_TOL) * prev:
            growth_count += 1
            if growth_count >= 2:
                raise Divergent("Kato functional grows under refinement", values=[v[0] for v in vals])
            continue
        break
    value, fw, bw, cells = vals[-1]
    est = abs(vals[-1][0] - vals[-2][0])
    return KatoReport(beta, T, value, fw, bw,
                      {"levels": levels, "cells": cells, "base_points": int(len(base_x))}, est)


# ---------------------------------------------------------------------------
# Localized L^p_q norm.

def chi_norm(p, d=1):
    """||chi||_{L^p(R^d)} for the pinned cutoff, d in {1, 2}."""
    if p == np.inf:
        return 1.0
    from scipy.integrate import quad
    if d == 1:
        val = 2.0 * (1.0 + quad(lambda r: chi(r) ** p, 1.0, 2.0)[0])
    else:
        val = 2.0 * math.pi * (0.5 + quad(lambda r: r * chi(r) ** p, 1.0, 2.0)[0])
    return float(val ** (1.0 / p))


def _panels_1d(lo, hi, breaks, singular, delta, n_gl=8):
    """Gauss-Legendre nodes on [lo, hi] with geometric grading toward the
    singular points down to distance delta.  Returns nodes, weights and, for
    every singular point, the list of node-index groups of the graded panels
    ordered from the innermost outward."""
    pts = {lo, hi}
    for b in breaks:
        if lo < b < hi:
            pts.add(float(b))
    groups_spec = []
    for sp in singular:
        if lo - 1.0 < sp < hi + 1.0:
            for sgn in (1.0, -1.0):
                rings = []
                r = delta
                while r < 1.0:
                    rings.append(r)
                    r *= 2.0
                rings.append(1.0)
                for r in rings:
                    q = sp + sgn * r
                    if lo < q < hi:
                        pts.add(q)
                if lo <= sp <= hi:
                    pts.add(float(sp))
                groups_spec.append((sp, sgn, rings))
    edges = np.array(sorted(pts))
    gx, gw = np.polynomial.legendre.leggauss(n_gl)
    a, b = edges[:-1], edges[1:]
    nodes = (0.5 * (a + b)[:, None] + 0.5 * (b - a)[:, None] * gx[None, :])
    weights = 0.5 * (b - a)[:, None] * gw[None, :]
    groups = []
    for sp, sgn, rings in groups_spec:
        inner = [0.0] + rings
        seq = []
        for r_in, r_out in zip(inner[:-1], inner[1:]):
            p_lo, p_hi = sorted((sp + sgn * r_in, sp + sgn * r_out))
            sel = np.where((a >= p_lo - 1e-15) & (b <= p_hi + 1e-15))[0]
            seq.append(sel)
        groups.append(seq)
    return nodes, weights, groups


def _power_integral(f, t, z, p, level, chi_center=True):
    """int |f(t, x) chi_z(x)|^p dx for d = 1 with singular tail extrapolation."""
    delta = 10.0 ** (-(2 ** (level + 1)))
    lo, hi = z - 2.0, z + 2.0
    breaks = [z - 1.0, z + 1.0]
    if f.support_hint is not None:
        breaks += [float(f.support_hint[0][0]), float(f.support_hint[1][0])]
    breaks += [float(b) for b in f.breaks]
    sing = [float(np.asarray(sp).ravel()[0]) for sp in f.singular_points]
    nodes, weights, groups = _panels_1d(lo, hi, breaks, sing, delta)
    x = nodes.ravel()
    vals = np.abs(f.eval(np.full(x.shape, t), x[:, None])) * chi(np.abs(x - z))
    if not np.all(np.isfinite(vals)):
        raise Divergent("field not finite at a quadrature node")
    if p == np.inf:
        return float(vals.max())
    integrand = (vals ** p).reshape(nodes.shape) * weights
    panel = integrand.sum(1)
    total = float(panel.sum())
    # the innermost panel [sp, sp + delta] is replaced by a geometric tail
    # whose ratio is fitted on rings 1..4; ratios near or above 1 signal a
    # non-integrable (or borderline) power and leave the raw sum in place
    for seq in groups:
        if len(seq) < 5 or any(len(g) == 0 for g in seq[:5]):
            continue
        p0 = float(panel[seq[0]].sum())
        p1 = float(panel[seq[1]].sum())
        p4 = float(panel[seq[4]].sum())
        if p1 <= 0 or p4 <= 0:
            continue
        ratio = (p1 / p4) ** (1.0 / 3.0)
        if ratio < 0.97:
            total += p1 * ratio / (1.0 - ratio) - p0
    return total


def _power_integral_2d(f, t, z, p, level):
    n = 64 * 2 ** level
    ax0 = z[0] - 2.0 + (np.arange(n) + 0.5) * 4.0 / n
    ax1 = z[1] - 2.0 + (np.arange(n) + 0.5) * 4.0 / n
    X, Y = np.meshgrid(ax0, ax1, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel()], -1)
    vals = np.abs(f.eval(np.full(len(pts), t), pts)) * chi(np.sqrt(((pts - z) ** 2).sum(-1)))
    if not np.all(np.isfinite(vals)):
        raise Divergent("field not finite at a quadrature node")
    if p == np.inf:
        return float(vals.max())
    return float((vals ** p).sum() * (4.0 / n) ** 2)


def _centers(f, spacing=0.5):
    d = f.d
    if f.support_hint is None:
        lo, hi = -np.ones(d), np.ones(d)
    else:
        lo = np.asarray(f.support_hint[0], float) - 2.0
        hi = np.asarray(f.support_hint[1], float) + 2.0
    axes = [np.arange(lo[k], hi[k] + 1e-12, spacing) for k in range(d)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], -1)


def _lpq_level(f, p, q, T, level, centers):
    if f.time_homogeneous:
        tn = np.array([0.5 * T])
        tw = np.array([T])
    else:
        n_pan = 8 * 2 ** level
        gx, gw = np.polynomial.legendre.leggauss(4)
        e = np.linspace(0.0, T, n_pan + 1)
        tn = (0.5 * (e[1:] + e[:-1])[:, None] + 0.5 * np.diff(e)[:, None] * gx).ravel()
        tw = (0.5 * np.diff(e)[:, None] * gw).ravel()
    best = 0.0
    for z in centers:
        inner = []
        for t in tn:
            if f.d == 1:
                I = _power_integral(f, t, float(z[0]), p, level)
            else:
                I = _power_integral_2d(f, t, z, p, level)
            inner.append(I if p == np.inf else max(I, 0.0) ** (1.0 / p))
        inner = np.array(inner)
        if q == np.inf:
            val = float(inner.max())
        else:
            val = float(np.sum(tw * inner ** q) ** (1.0 / q))
        best = max(best, val)
    return best


def lpq_norm(f, p, q, T=1.0, centers=None, max_levels=4):
    """sup_z ( int_0^T ||f(t) chi_z||_{L^p}^q dt )^(1/q), sup over a center lattice."""
    if p < 1 or q < 1:
        raise DomainError("p, q must be >= 1")
    if not (0 < T <= 1):
        raise DomainError("T must lie in (0, 1]")
    if f.is_zero():
        return 0.0
    centers = _centers(f) if centers is None else np.atleast_2d(np.asarray(centers, float))
    vals = [_lpq_level(f, p, q, T, 0, centers), _lpq_level(f, p, q, T, 1, centers)]
    # growth is judged on the p-th power, i.e. on the quadrature sum itself
    pw = 1.0 if p == np.inf else p
    growth = 0
    while True:
        prev, cur = vals[-2] ** pw, vals[-1] ** pw
        if prev > 0 and cur > (1.0 + GROWTH_TOL) * prev:
            growth += 1
            if growth >= 2:
                raise Divergent("localized norm grows under refinement", values=vals)
            if len(vals) >= max_levels:
                raise Divergent("localized norm did not settle", values=vals)
            vals.append(_lpq_level(f, p, q, T, len(vals), centers))
            continue
        return vals[-1]


# ---------------------------------------------------------------------------
# Certifiers for the three inequalities.

def check_rho_vs_eta(lam, beta, samples=None, d=1):
    """max over samples of rho_{lam,-beta} / eta_beta."""
    if samples is None:
        t = np.logspace(-4, 0, 100)
        r = np.concatenate([[0.0], np.logspace(-4, 1.5, 99)])
        T, Rr = np.meshgrid(t, r, indexing="ij")
        samples = (T.ravel(), Rr.ravel())
    t, r = (np.asarray(a, float) for a in samples)
    ratio = rho(lam, -beta, t, r, d=1 if d == 1 else None) if d == 1 else None
    if d != 1:
        x = np.zeros((len(r), d))
        x[:, 0] = r
        ratio = rho(lam, -beta, t, x) / eta_beta(beta, t, x)
    else:
        ratio = ratio / eta_beta(beta, t, r, d=1)
    k = int(np.argmax(ratio))
    return CertReport("rho_vs_eta", float(ratio[k]), (float(t[k]), float(r[k])),
                      {"lam": lam, "beta": beta, "n_samples": int(len(t))})


def in_index_set(beta, p, q, d=1):
    dp = 0.0 if p == np.inf else d / p
    dq = 0.0 if q == np.inf else 2.0 / q
    return dp + dq < 2.0 - beta


def check_kvsl(f, beta, p, q, T_list, d=None):
    """Regress log K^beta_f(T) on log T and compare with (2-beta-d/p-2/q)/2."""
    d = f.d if d is None else d
    if not in_index_set(beta, p, q, d):
        raise IndexSetError(f"(p,q)=({p},{q}) not in I_beta for beta={beta}, d={d}")
    expo = 0.5 * (2.0 - beta - (0.0 if p == np.inf else d / p) - (0.0 if q == np.inf else 2.0 / q))
    T_list = np.asarray(T_list, float)
    if f.is_zero():
        return ScalingReport(float("nan"), expo, 0.0, T_list.tolist(), [0.0] * len(T_list), True)
    K = np.array([kato_functional(f, beta, float(T)).value for T in T_list])
    if np.all(K == 0):
        return ScalingReport(float("nan"), expo, 0.0, T_list.tolist(), K.tolist(), True)
    slope = float(np.polyfit(np.log(T_list), np.log(K), 1)[0])
    norms = np.array([lpq_norm(f, p, q, float(T)) for T in T_list])
    fitted = float(np.max(K / (T_list ** expo * norms)))
    return ScalingReport(slope, expo, fitted, T_list.tolist(), K.tolist(), False)


def _conv_lhs(b, beta, beta_p, lam, s, t, x, y, n_tau, n_gh):
    """int_s^t int rho_{lam,-beta'}(tau-s,x-z)|b(tau,z)| rho_{2lam,-beta}(t-tau,z-y) dz dtau (d = 1)."""
    mid = 0.5 * (s + t)
    half = 0.5 * (t - s)
    gh_x, gh_w = np.polynomial.hermite.hermgauss(n_gh)
    total = 0.0
    # left half: weight (tau - s)^(-beta'/2); right half: (t - tau)^(-beta/2)
    for side in (0, 1):
        e = -beta_p / 2.0 if side == 0 else -beta / 2.0
        xj, wj = roots_jacobi(n_tau, 0.0, e) if side == 0 else roots_jacobi(n_tau, e, 0.0)
        # map [-1, 1] -> [s, mid] (side 0) or [mid, t] (side 1)
        lo = s if side == 0 else mid
        tau = lo + 0.5 * half * (xj + 1.0)
        u_sing = (tau - s) if side == 0 else (t - tau)
        jac = (0.5 * half) ** (1.0 + e)
        for tk, wk, us in zip(tau, wj, u_sing):
            u1, u2 = tk - s, t - tk
            A = lam * (1.0 / u1 + 2.0 / u2)
            c = (x / u1 + 2.0 * y / u2) / (1.0 / u1 + 2.0 / u2)
            base = u1 ** (-(1.0 + beta_p) / 2.0) * u2 ** (-(1.0 + beta) / 2.0)
            base *= math.exp(-2.0 * lam * (x - y) ** 2 / (2.0 * u1 + u2))
            zs = c + gh_x / math.sqrt(A)
            bz = np.abs(b.eval(np.full(n_gh, tk), zs[:, None]))
            inner = float(np.sum(gh_w * bz)) / math.sqrt(A)
            total += jac * wk * base * inner * us ** (-e)
    return total


def check_convolution_bound(b, beta, beta_p, lam, s, t, x_grid=None, y_grid=None,
                            n_tau=12, n_gh=24):
    """Max over (x, y) of the triple-integral LHS divided by
    K^beta_{|b|}(t-s) * rho_{lam,-beta'}(t-s, x-y); also reports the drift
    of that maximum under a doubling of both quadratures."""
    if beta < beta_p or beta_p < 0:
        raise DomainError("need beta >= beta' >= 0")
    if b.d != 1:
        raise DomainError("convolution certifier implemented for d = 1")
    x_grid = np.linspace(-1.0, 1.0, 5) if x_grid is None else np.asarray(x_grid, float)
    y_grid = np.linspace(-1.0, 1.0, 5) if y_grid is None else np.asarray(y_grid, float)
    if b.is_zero():
        return CertReport("convolution_bound", 0.0, (), {"lhs_max": 0.0, "K": 0.0, "drift": 0.0})
    K = kato_functional(b.abs(), beta, t - s).value
    results = []
    for level in range(3):
        nt, ng = n_tau * 2 ** level, n_gh * 2 ** level
        best, worst, lhs_max = 0.0, (), 0.0
        for x in x_grid:
            for y in y_grid:
                lhs = _conv_lhs(b, beta, beta_p, lam, s, t, float(x), float(y), nt, ng)
                rhs = K * rho(lam, -beta_p, t - s, x - y, d=1)
                r = lhs / rhs if rhs > 0 else np.inf
                lhs_max = max(lhs_max, lhs)
                if r > best:
                    best, worst = r, (float(x), float(y))
        results.append((best, worst, lhs_max))
        if level >= 1:
            drift = abs(results[-1][0] - results[-2][0]) / max(results[-2][0], 1e-300)
            if drift <= GROWTH_TOL:
                break
    else:
        raise Divergent("convolution quadrature does not settle")
    best, worst, lhs_max = results[-1]
    return CertReport("convolution_bound", best, worst,
                      {"lhs_max": lhs_max, "K": K, "drift": drift, "levels": len(results)})
