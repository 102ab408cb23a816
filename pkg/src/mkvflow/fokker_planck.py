"""Finite-volume solver for the nonlinear Fokker-Planck equation in d = 1.

    d/dt mu = d2/dx2 (a(t, x, mu) mu) - d/dx (b(t, x, mu) mu)

Conservative flux form on a uniform box with zero-flux walls.  Coefficients
are frozen at the state at the start of each step.  Diffusion is a theta
scheme (backward Euler for the first steps, then Crank-Nicolson), advection
is explicit first-order upwind.
"""
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import trapezoid

from . import _accel
from .errors import CFLViolation, DomainError, NonFiniteState
from .kato import lpq_norm
from .measures import Measure, MeasureFlow
from .mkv import mollified_xi
from .parametrix import _avoid_nodes
from .reports import CertReport

NEG_TOL = 1e-10


@dataclass
class FpeState:
    values: np.ndarray
    lo: float
    hi: float
    t: float = 0.0
    prev_dt: float = 0.0
    log: dict = field(default_factory=lambda: {"clipped": 0.0, "cfl_max": 0.0, "steps": 0})

    @property
    def cells(self):
        return len(self.values)

    @property
    def h(self):
        return (self.hi - self.lo) / self.cells

    def centers(self):
        return self.lo + (np.arange(self.cells) + 0.5) * self.h

    def measure(self):
        return Measure.grid([self.lo], [self.hi], [self.cells], self.values)

    def mass(self):
        return float(self.values.sum() * self.h)


def _coefficients(state, coeffs):
    m = state.measure()
    z = state.centers()
    faces = state.lo + state.h * np.arange(1, state.cells)
    faces = _avoid_nodes(faces, state.h, coeffs.singular_points)
    a = coeffs.a(state.t, z[:, None], m)
    b = coeffs.b(state.t, faces[:, None], m) if coeffs.b_eval is not None else np.zeros(len(faces))
    return a, b


def cfl_bound(b, h):
    bmax = float(np.abs(b).max()) if len(b) else 0.0
    return math.inf if bmax == 0 else h / bmax


def nfpe_step(state, coeffs, dt, theta=1.0):
    """One step; returns a new FpeState."""
    if dt == 0:
        return FpeState(state.values.copy(), state.lo, state.hi, state.t, state.prev_dt,
                        dict(state.log))
    if coeffs.d != 1:
        raise DomainError("the finite-volume solver works in d = 1")
    h, n = state.h, state.cells
    a, b = _coefficients(state, coeffs)
    bound = cfl_bound(b, h)
    if dt > bound * (1 + 1e-12):
        raise CFLViolation("upwind CFL bound exceeded", dt=dt, bound=bound)
    u = state.values
    # advection: upwind face fluxes, zero at the walls
    flux = np.maximum(b, 0.0) * u[:-1] + np.minimum(b, 0.0) * u[1:]
    adv = np.zeros(n)
    adv[:-1] -= flux
    adv[1:] += flux
    rhs = u + dt * adv / h
    # diffusion of w = a u: (D w)_j = (w_{j+1} - 2 w_j + w_{j-1}) / h^2 with walls
    r = dt / (h * h)

    def Dw(v):
        w = a * v
        out = np.zeros(n)
        out[:-1] += w[1:] - w[:-1]
        out[1:] -= w[1:] - w[:-1]
        return out
    if theta < 1.0:
        rhs = rhs + (1.0 - theta) * r * Dw(u)
    lower = np.zeros(n)
    upper = np.zeros(n)
    diag = np.ones(n)
    lower[1:] = -theta * r * a[:-1]
    upper[:-1] = -theta * r * a[1:]
    diag[:-1] += theta * r * a[:-1]
    diag[1:] += theta * r * a[1:]
    new = _accel.thomas_batch(lower[None], diag[None], upper[None], rhs[None])[0]
    if not np.all(np.isfinite(new)):
        raise NonFiniteState("non-finite density after step", t=state.t + dt)
    log = dict(state.log)
    neg = float(-min(new.min(), 0.0))
    log["clipped"] = max(log["clipped"], neg)
    log["cfl_max"] = max(log["cfl_max"], dt / bound if bound < math.inf else 0.0)
    log["steps"] = log["steps"] + 1
    new = np.clip(new, 0.0, None) if neg > 0 else new
    return FpeState(new, state.lo, state.hi, state.t + dt, dt, log)


def _battery(z):
    return np.stack([np.cos(z), np.sin(z), np.tanh(z), np.exp(-z * z), np.cos(2 * z)])


def solve_nfpe(scenario, cells=None, dt=None, startup=4, theta=0.5, t0=0.0, init=None):
    """Flow on the scenario time grid.

    The first ``startup`` steps are backward Euler at a quarter of dt, then
    the theta scheme (Crank-Nicolson by default) runs at dt.
    ``init`` (a grid Measure, default xi mollified by one cell) is the state
    at t0.  dt defaults to min(h, CFL) / 2; each flow node is hit exactly.
    """
    coeffs = scenario.coefficients
    cells = cells or scenario.cells
    lo, hi = scenario.box
    h = (hi - lo) / cells
    if init is None:
        base = scenario if cells == scenario.cells else _regridded(scenario, cells)
        init = mollified_xi(base)
    state = FpeState(np.asarray(init.values, float).ravel().copy(), lo, hi, t0)
    m0 = state.mass()
    dt_max = dt
    if dt_max is None:
        _, b = _coefficients(state, coeffs)
        dt_max = 0.5 * min(h, 0.5 * cfl_bound(b, h))
    times = [t for t in scenario.times if t > t0 + 1e-15]
    z = state.centers()
    F = _battery(z)
    prev = F @ state.values * h
    jump = 0.0
    out = []
    k = 0
    for tn in times:
        while state.t < tn - 1e-14:
            # backward-Euler startup runs at quarter steps to damp its O(dt) error
            th = 1.0 if k < startup else theta
            step = min(dt_max if th != 1.0 or theta == 1.0 else 0.25 * dt_max, tn - state.t)
            _, b = _coefficients(state, coeffs)
            step = min(step, cfl_bound(b, h))
            state = nfpe_step(state, coeffs, step, th)
            k += 1
            cur = F @ state.values * h
            jump = max(jump, float(np.abs(cur - prev).max()))
            prev = cur
        out.append(Measure.grid([lo], [hi], [cells], state.values.copy()))
    flow = MeasureFlow(np.asarray(times), out, scenario.weight)
    flow.info = {"mass_drift": abs(state.mass() - m0), "max_jump": jump, "steps": k,
                 "clipped": state.log["clipped"], "cfl_max": state.log["cfl_max"],
                 "dt": dt_max}
    return flow


def _regridded(scenario, cells):
    import copy
    sc = copy.copy(scenario)
    sc.cells = cells
    return sc


def krylov_check(flow, f, p, q, sub=8, T=1.0):
    """lhs = int_0^T <|f|(t, .), mu_t> dt against ||f||_{L^p_q}.

    Cell integrals of |f| use `sub` Gauss-Legendre points per cell; the time
    integral is the trapezoid rule over [0, flow nodes], with mu at t = 0
    taken from the first node.
    """
    gx, gw = np.polynomial.legendre.leggauss(sub)
    vals = []
    for t, m in zip(flow.times, flow.measures):
        if m.kind != "grid" or m.dim != 1:
            raise DomainError("krylov_check needs 1-d grid flows")
        e = m.edges()[0]
        mid, half = 0.5 * (e[1:] + e[:-1]), 0.5 * np.diff(e)
        pts = (mid[:, None] + half[:, None] * gx[None, :]).ravel()
        fx = np.abs(f.eval(np.full(len(pts), t), pts[:, None])).reshape(len(mid), sub)
        cell_int = (fx * gw[None, :]).sum(1) * half
        vals.append(float(cell_int @ m.values.ravel()))
    ts = np.concatenate([[0.0], flow.times])
    vs = np.concatenate([[vals[0]], vals])
    sel = ts <= T + 1e-12
    lhs = float(trapezoid(vs[sel], ts[sel]))
    rhs = 0.0 if f.is_zero() else float(lpq_norm(f, p, q, T=T))
    ratio = lhs / rhs if rhs > 0 else (0.0 if lhs == 0 else math.inf)
    return CertReport("krylov", ratio, (), {"lhs": lhs, "rhs_norm": rhs, "ratio": ratio})
