"""Distribution-dependent layer.

Coefficients sigma(t, x, m), b(t, x, m) are frozen along a measure flow to
give an ordinary CoefficientField; psi maps a flow to the law of the frozen
diffusion started from the initial law, and damped Picard iteration looks
for fixed points of psi.  The uniqueness-gap diagnostic compares the
transition kernels frozen along two flows that agree at a common start time.
"""
from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import _accel
from .errors import DomainError, GridMismatch, MissingDerivative
from .jsonio import write_csv
from .kato import rho
from .measures import (Measure, MeasureFlow, WeightFunction, default_times, dphi_metric,
                       phi_norm, rebin, tv_distance)
from .parametrix import (CoefficientField, ResidualOp, SeriesConfig, _CumA, default_x_nodes,
                         propagate, spacetime_convolve)
from .reports import PropertyReport


@dataclass
class MkvCoefficients:
    """sigma(t, x, m) and b(t, x, m) with regularity metadata.

    ``sigma_eval(t, x, m)`` gets a scalar t, points x of shape (n, d) and a
    Measure; it returns (n,) when d = d1 = 1, else (n, d, d1).  ``b_eval``
    returns (n,) or (n, d); None means b = 0.  ``lfd_a(t, x, m, y)`` returns
    delta a / delta m as (n_x, n_y) in d = 1.
    """
    sigma_eval: object
    b_eval: object = None
    lfd_a: object = None
    d: int = 1
    d1: int = 1
    Lam: float = 1.0
    alpha: float = 1.0
    N1: float = 0.0
    N2: float = 0.0
    p: float = math.inf
    q: float = math.inf
    beta: float = 1.0
    ell: float = 0.0
    modulus: float = 0.0
    m_independent: bool = False
    a_space_constant: bool = False
    singular_points: tuple = ()
    name: str = "mkv"

    def sigma(self, t, x, m):
        x = np.asarray(x, float).reshape(-1, self.d)
        v = np.asarray(self.sigma_eval(float(t), x, m), float)
        return v.reshape(len(x), self.d, self.d1)

    def a(self, t, x, m):
        s = self.sigma(t, x, m)
        a = 0.5 * np.einsum("nik,njk->nij", s, s)
        return a[:, 0, 0] if self.d == 1 else a

    def b(self, t, x, m):
        x = np.asarray(x, float).reshape(-1, self.d)
        if self.b_eval is None:
            return np.zeros(len(x)) if self.d == 1 else np.zeros((len(x), self.d))
        v = np.asarray(self.b_eval(float(t), x, m), float)
        return v.reshape(len(x)) if self.d == 1 else v.reshape(len(x), self.d)

    def lfd_normalization(self, t, x, m):
        """max_x |int delta a / delta m (t, x, m)(y) m(dy)|."""
        if self.lfd_a is None:
            raise MissingDerivative("coefficients carry no delta a / delta m")
        pts, w = m.support_points()
        vals = np.asarray(self.lfd_a(float(t), np.asarray(x, float).reshape(-1, 1), m, pts), float)
        return float(np.abs(vals @ w).max())


@dataclass
class ScenarioConfig:
    coefficients: MkvCoefficients
    xi: Measure
    weight: WeightFunction = field(default_factory=WeightFunction.one)
    times: np.ndarray = field(default_factory=default_times)
    box: tuple = (-6.0, 6.0)
    cells: int = 256
    series: SeriesConfig = field(default_factory=SeriesConfig)
    picard: dict = field(default_factory=lambda: {"max_iter": 15, "tol_dphi": 1e-3, "damping": 0.5})
    seed: int = 0
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, float)
        if not math.isfinite(phi_norm(self.xi, self.weight)):
            raise DomainError("initial law has infinite phi-moment")
        if not self.xi.is_probability():
            raise DomainError("initial law must be a probability measure")

    @property
    def h(self):
        return (self.box[1] - self.box[0]) / self.cells

    def edges(self):
        return np.linspace(self.box[0], self.box[1], self.cells + 1)

    def centers(self):
        e = self.edges()
        return 0.5 * (e[1:] + e[:-1])

    def grid_measure(self, values):
        return Measure.grid([self.box[0]], [self.box[1]], [self.cells], values)

    def to_dict(self):
        return {"name": self.name, "params": dict(self.params), "box": list(self.box),
                "cells": self.cells, "K": len(self.times), "seed": self.seed,
                "picard": dict(self.picard), "series": self.series.to_dict(),
                "weight": self.weight.to_dict()}


@dataclass
class FixedPointTrace:
    iterates: list
    residuals: list
    converged: bool
    final_flow: MeasureFlow
    wallclock_ms: list = field(default_factory=list)

    def to_csv(self, path):
        write_csv(path, ["iter", "residual", "wallclock_ms"],
                  ((k + 1, float(r), float(w)) for k, (r, w) in
                   enumerate(zip(self.residuals, self.wallclock_ms))))

    def to_dict(self):
        return {"residuals": [float(r) for r in self.residuals], "converged": self.converged,
                "iterations": len(self.residuals), "wallclock_ms": list(self.wallclock_ms)}


# ---------------------------------------------------------------------------
# Freezing and psi.

def freeze(coeffs, mu, validate=True):
    """CoefficientField with a(t, x) = a(t_k, x, mu_{t_k}) for t in [t_k, t_{k+1}).

    Both the measure and the explicit time argument are read at the left flow
    node (node 0 before the first node).  m-independent coefficients are
    returned unchanged in t.
    """
    d = coeffs.d
    times = mu.times

    if coeffs.m_independent:
        m0 = mu.measures[0]

        def a_fn(t, x):
            return np.concatenate([coeffs.a(tk, x[i:i + 1], m0) for i, tk in enumerate(t)]) \
                if np.ptp(t) > 0 else coeffs.a(t[0], x, m0)

        def b_fn(t, x):
            return np.concatenate([coeffs.b(tk, x[i:i + 1], m0) for i, tk in enumerate(t)]) \
                if np.ptp(t) > 0 else coeffs.b(t[0], x, m0)
    else:
        cache = {}

        def grouped(kind, t, x):
            k_idx = np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(times) - 1)
            out = None
            for k in np.unique(k_idx):
                sel = k_idx == k
                xs = np.ascontiguousarray(x[sel])
                key = (kind, int(k), xs.shape, xs.tobytes())
                v = cache.get(key)
                if v is None:
                    fn = coeffs.a if kind == "a" else coeffs.b
                    v = fn(times[k], xs, mu.measures[k])
                    if len(cache) > 4096:
                        cache.clear()
                    cache[key] = v
                if out is None:
                    out = np.empty((len(t),) + v.shape[1:])
                out[sel] = v
            return out

        a_fn = lambda t, x: grouped("a", t, x)
        b_fn = lambda t, x: grouped("b", t, x)

    fld = CoefficientField(a_fn, b_fn if coeffs.b_eval is not None else None, d,
                           Lam=coeffs.Lam, alpha=coeffs.alpha, N1=coeffs.N1, N2=coeffs.N2,
                           p=coeffs.p, q=coeffs.q, t_breaks=tuple(float(t) for t in times),
                           singular_points=tuple(coeffs.singular_points),
                           a_space_constant=coeffs.a_space_constant,
                           name=f"{coeffs.name} frozen")
    if validate:
        m0 = mu.measures[0]
        box = (float(m0.lo[0]), float(m0.hi[0])) if m0.kind == "grid" else (-4.0, 4.0)
        fld.validate(box=box, n=33, times=times[:: max(1, len(times) // 4)])
    return fld


def constant_flow(scenario, m=None):
    """The flow equal to m (default: xi mollified by one grid cell) at every node."""
    m = m if m is not None else mollified_xi(scenario)
    return MeasureFlow(scenario.times, [m] * len(scenario.times), scenario.weight)


def mollified_xi(scenario):
    """Grid density of xi convolved with a Gaussian of bandwidth one cell."""
    xi, h = scenario.xi, scenario.h
    edges = scenario.edges()
    if xi.kind == "atoms":
        pts, w = xi.support_points()
        M = _accel.cell_gauss(edges, pts[:, 0], np.full(len(w), h))
        vals = (M @ w) / h
    else:
        g = rebin(xi, [scenario.box[0]], [scenario.box[1]], [scenario.cells])
        z = scenario.centers()
        M = _accel.cell_gauss(edges, z, np.full(len(z), h))
        vals = M @ (g.values.ravel() * h) / h
    vals = vals / (vals.sum() * h)
    return scenario.grid_measure(vals)


def _start_rows(scenario, start):
    if start.kind == "atoms":
        pts, w = start.support_points()
        return ("points", pts[:, 0]), w
    g = start
    if not (g.cells == (scenario.cells,) and np.isclose(g.lo[0], scenario.box[0])
            and np.isclose(g.hi[0], scenario.box[1])):
        g = rebin(start, [scenario.box[0]], [scenario.box[1]], [scenario.cells])
    return ("density", g.values.reshape(1, -1)), np.ones(1)


def psi(scenario, mu, s=0.0, start=None, times=None):
    """Law of the diffusion with coefficients frozen along mu, started from
    ``start`` (default xi) at time s, on ``times`` (default the flow grid).

    Output densities are cell averages renormalized to mass 1; the raw mass
    defect is kept in ``flow.info``.
    """
    if scenario.coefficients.d != 1:
        raise DomainError("psi is implemented in d = 1")
    fld = freeze(scenario.coefficients, mu)
    times = mu.times if times is None else np.asarray(times, float)
    start = scenario.xi if start is None else start
    init, w = _start_rows(scenario, start)
    cfg = dataclasses.replace(scenario.series, cell_output=True)
    ker = propagate(fld, init, s, times, scenario.box, scenario.cells, cfg)
    vals = np.tensordot(w, ker.values, axes=(0, 0))
    mass = vals.sum(-1) * scenario.h
    vals = vals / mass[:, None]
    flow = MeasureFlow(times, [scenario.grid_measure(v) for v in vals], scenario.weight, s_phi=True)
    flow.info = {"mass_defect": float(np.abs(mass - 1.0).max()),
                 "term_ratio": ker.meta["term_ratio"], "windows": ker.meta["windows"]}
    return flow


def picard_iterate(scenario, mu0=None, max_iter=None, tol=None, damping=None, log=None):
    """Damped Picard iteration mu <- (1 - damping) psi(mu) + damping mu.

    Starts from psi of the constant mollified-xi flow unless ``mu0`` is given.
    Non-convergence is reported in the trace, never raised.
    """
    pc = scenario.picard
    max_iter = pc.get("max_iter", 15) if max_iter is None else max_iter
    tol = pc.get("tol_dphi", 1e-3) if tol is None else tol
    damping = pc.get("damping", 0.5) if damping is None else damping
    if not 0.0 <= damping <= 1.0:
        raise DomainError("damping must lie in [0, 1]")
    mu = psi(scenario, constant_flow(scenario)) if mu0 is None else mu0
    iterates, residuals, wall = [mu], [], []
    converged = False
    for it in range(max_iter):
        t0 = time.perf_counter()
        new = psi(scenario, mu)
        if damping > 0:
            new = new.combine(mu, 1.0 - damping)
        r = dphi_metric(new, mu, scenario.weight)
        wall.append(1000.0 * (time.perf_counter() - t0))
        residuals.append(r)
        iterates.append(new)
        mu = new
        if log:
            log(f"iter {it + 1}: d_phi residual {r:.3e}")
        if not math.isfinite(r):
            break
        if r <= tol:
            converged = True
            break
    return FixedPointTrace(iterates, residuals, converged, mu, wall)


def fixed_point_residual(scenario, mu):
    """d_phi(psi(mu), mu) from scratch."""
    return dphi_metric(psi(scenario, mu), mu, scenario.weight)


def equicontinuity_ratio(flow, gamma, t0=0.1, phi=None):
    """max over node pairs t2 > t1 >= t0 of ||mu_t2 - mu_t1||_phi / (t2 - t1)^(gamma/2)."""
    phi = phi or flow.weight
    idx = np.where(flow.times >= t0)[0]
    best = 0.0
    for i in idx:
        for j in idx[idx > i]:
            dt = flow.times[j] - flow.times[i]
            best = max(best, phi_norm(flow[j] - flow[i], phi) / dt ** (gamma / 2.0))
    return best


# ---------------------------------------------------------------------------
# Linear functional derivatives.

@dataclass
class Functional:
    """f(m) with its linear functional derivative lfd(m) -> (y -> values)."""
    f: object
    lfd: object = None
    name: str = "functional"

    @classmethod
    def linear(cls, g):
        return cls(lambda m: float(m.pair(g)),
                   lambda m: (lambda y: g(y) - float(m.pair(g))), "linear")

    @classmethod
    def quadratic(cls, g):
        def lfd(m):
            c = float(m.pair(g))
            return lambda y: 2.0 * c * (g(y) - c)
        return cls(lambda m: float(m.pair(g)) ** 2, lfd, "quadratic")


def lfd_check(fun, m, m2, n_gauss=16, tol=1e-6):
    """Compare f(m) - f(m2) with int_0^1 <df/dm(m_lam), m - m2> dlam, and the
    bound |f(m) - f(m2)| <= sup |df/dm| ||m - m2||_TV."""
    if fun.lfd is None:
        raise MissingDerivative(f"{fun.name} has no linear functional derivative")
    for mm in (m, m2):
        if not mm.is_probability():
            raise DomainError("lfd_check needs probability measures")
    lhs = fun.f(m) - fun.f(m2)
    diff = m - m2
    x, w = np.polynomial.legendre.leggauss(n_gauss)
    lam, w = 0.5 * (x + 1.0), 0.5 * w
    rhs, sup = 0.0, 0.0
    pts = np.concatenate([m.support_points()[0], m2.support_points()[0]])
    for lk, wk in zip(lam, w):
        ml = m * lk + m2 * (1.0 - lk)
        g = fun.lfd(ml)
        rhs += wk * float(diff.pair(g))
        sup = max(sup, float(np.abs(g(pts)).max()))
    err = abs(lhs - rhs)
    tv = tv_distance(m, m2)
    bound_ok = abs(lhs) <= sup * tv * (1 + 1e-12) + 1e-15
    return PropertyReport("lfd_identity", 1, int(err > tol) + int(not bound_ok), err, sup,
                          {"lhs": lhs, "rhs": rhs, "tv": tv, "bound": sup * tv})


# ---------------------------------------------------------------------------
# Uniqueness gap.

@dataclass
class GapReport:
    epsilon_T: float
    contraction_factor: float
    eps_by_T: dict = field(default_factory=dict)
    J: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    def to_dict(self):
        return {"epsilon_T": self.epsilon_T, "contraction_factor": self.contraction_factor,
                "eps_by_T": {str(k): v for k, v in self.eps_by_T.items()}, "J": self.J,
                **self.details}


def _p0_point_rows(kernel, t):
    win = kernel._windows[0]
    cum = _CumA(win.coeffs, win.grid.z, [win.w0, t])
    return win.p0_rows(t, cum, cell=False)


def uniqueness_gap(scenario, mu, mu_tilde, s, T, lam=0.1, n_x=16, n_t=16, halvings=2,
                   r2max=64.0, decompose=True, log=None):
    """epsilon(T') = sup |p - p~| / rho_lam over t - s <= T' for T' = T, T/2, ...

    Both flows are re-seeded at s from the common measure mu_s: the kernels
    are frozen along psi_s(mu) and psi_s(mu~) started from mu_s.  The
    contraction factor is epsilon(T/2) / epsilon(T).
    """
    if s == 0.0:
        common = scenario.xi
        seed_gap = 0.0
    else:
        common = mu.at(s)
        seed_gap = tv_distance(common, mu_tilde.at(s))
    t_nodes = s + T * np.arange(1, n_t + 1) / n_t
    if t_nodes[-1] > 1.0 + 1e-12:
        raise DomainError("window [s, s + T] must lie in [0, 1]")
    nu = psi(scenario, mu, s=s, start=common, times=t_nodes)
    nu_t = psi(scenario, mu_tilde, s=s, start=common, times=t_nodes)
    c = scenario.coefficients
    f1, f2 = freeze(c, nu), freeze(c, nu_t)
    x_nodes = default_x_nodes(scenario.box, scenario.cells, n_x)
    cfg = scenario.series
    p = propagate(f1, ("points", x_nodes), s, t_nodes, scenario.box, scenario.cells, cfg)
    pt = propagate(f2, ("points", x_nodes), s, t_nodes, scenario.box, scenario.cells, cfg)
    q = p.values - pt.values
    y = p.y_nodes
    dt = t_nodes - s
    r2 = (x_nodes[:, None] - y[None, :]) ** 2
    inside = r2[:, None, :] <= r2max * dt[None, :, None]
    env = rho(lam, 0.0, dt[None, :, None], np.sqrt(r2)[:, None, :], d=1)
    ratio = np.where(inside, np.abs(q) / np.where(inside, env, 1.0), 0.0)
    per_t = ratio.max(axis=(0, 2))
    T_list = [T / 2 ** k for k in range(halvings + 1)]
    eps = {Tk: float(per_t[dt <= Tk * (1 + 1e-9)].max()) for Tk in T_list}
    factors = [eps[T_list[k + 1]] / eps[T_list[k]] if eps[T_list[k]] > 0 else 0.0
               for k in range(halvings)]
    J = {}
    if decompose and p.meta["windows"] == 1 and pt.meta["windows"] == 1 and np.any(q):
        J = _duhamel_terms(p, pt, f1, f2, t_nodes, cfg)
        J["relative_residual"] = float(np.abs(q - J.pop("_sum")).max() / np.abs(q).max())
        if log:
            log("Duhamel terms: " + ", ".join(f"{k}={v:.3e}" for k, v in J.items()))
    return GapReport(eps[T], factors[0] if factors else 0.0, eps, J,
                     {"factors": factors, "seed_gap": seed_gap, "lam": lam,
                      "nu_gap_tv": max(tv_distance(a, b) for a, b in zip(nu.measures, nu_t.measures))})


def _duhamel_terms(p, pt, f1, f2, t_nodes, cfg):
    """q = J0 + J1 + J2 + J3 with
    J0 = p0 - p~0, J1 = (p - p~) (x) Phi, J2 = p~ (x) [(L - L~) frozen
    with the variance of p0], J3 = p~ (x) [(L~ - L~0) (p0 - p~0)]."""
    J0 = np.stack([_p0_point_rows(p, t) - _p0_point_rows(pt, t) for t in t_nodes], 1)
    da = lambda tau, z: f1.a1(tau, z) - f2.a1(tau, z)
    db = (lambda tau, z: f1.b1(tau, z) - f2.b1(tau, z)) if f1.has_drift else None
    bt = f2.b1 if f2.has_drift else None
    J1 = spacetime_convolve(p - pt, ResidualOp.of(f1), t_nodes, cfg).values
    J2 = spacetime_convolve(pt, ResidualOp([(da, db, f1, 1.0)]), t_nodes, cfg).values
    J3 = spacetime_convolve(pt, ResidualOp([(f2.a1, bt, f1, 1.0), (f2.a1, bt, f2, -1.0)]),
                            t_nodes, cfg).values
    out = {f"J{k}": float(np.abs(v).max()) for k, v in enumerate((J0, J1, J2, J3))}
    out["_sum"] = J0 + J1 + J2 + J3
    return out
