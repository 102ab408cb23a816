"""Interacting-particle Euler-Maruyama simulator (stochastic oracle).

X_{k+1} = X_k + b(t_k, X_k, mu^N_k) dt + sigma(t_k, X_k, mu^N_k) sqrt(dt) Z_k,
with mu^N_k the empirical measure at the start of the step.  Normals come
from a Philox counter-based generator keyed by the seed, so runs are
bit-reproducible.  Pairwise sums cost O(N) per target and O(N^2) per step.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from . import _accel
from .errors import DomainError, MassLoss, ParticleBlowup
from .jsonio import write_csv
from .measures import Measure, MeasureFlow


@dataclass
class ParticleSystemConfig:
    N: int = 10_000
    dt: float = 1e-2
    seed: int = 0
    eps_moll: float = None
    scheme: str = "cap"
    record_times: tuple = (0.25, 0.5, 1.0)
    escape_factor: float = 10.0

    def __post_init__(self):
        if self.N < 100:
            raise DomainError("N >= 100 required")
        if not 0 < self.dt <= 1e-2:
            raise DomainError("dt must lie in (0, 1e-2]")
        if self.scheme not in ("cap", "shift"):
            raise DomainError("scheme is cap or shift")
        if self.eps_moll is not None and self.eps_moll <= 0:
            raise DomainError("eps_moll must be positive")


@dataclass
class EmpiricalFlow:
    times: np.ndarray
    particles: list
    info: dict = field(default_factory=dict)

    def to_csv(self, path):
        def rows():
            for t, X in zip(self.times, self.particles):
                for i, x in enumerate(X):
                    yield [float(t), i, *map(float, x)]
        d = self.particles[0].shape[1]
        write_csv(path, ["time", "particle_id"] + [f"x{k}" for k in range(d)], rows())


# ---------------------------------------------------------------------------
# Pairwise kernels.

@dataclass
class PowerKernel:
    """B(x, y) = sign (x - y) / |x - y|^kappa."""
    kappa: float
    sign: float = 1.0

    def __call__(self, t, x, y):
        diff = x - y
        with np.errstate(divide="ignore", invalid="ignore"):
            out = diff / np.abs(diff) ** self.kappa
        return self.sign * np.nan_to_num(out, nan=0.0)


def interaction_eval(kernel, particles, x, eps=None, scheme="cap", t=0.0):
    """(1/N) sum_j B(t, x, X^j) for each target x (d = 1).

    A PowerKernel is mollified: |x - X^j| becomes max(|x - X^j|, eps) under
    scheme=cap and |x - X^j| + eps under scheme=shift.  Other callables are
    summed directly.
    """
    X = np.asarray(particles, float).reshape(-1)
    x = np.asarray(x, float).reshape(-1)
    if len(X) == 0:
        return np.zeros(len(x))
    w = np.full(len(X), 1.0 / len(X))
    if isinstance(kernel, PowerKernel):
        if eps is None:
            raise DomainError("singular kernels need eps_moll")
        if scheme == "cap":
            v = _accel.pair_power_sum(x[:, None], X[:, None], w, kernel.kappa, eps)[:, 0]
            return kernel.sign * v
        out = np.zeros(len(x))
        step = max(1, 2_000_000 // len(X))
        for i0 in range(0, len(x), step):
            diff = x[i0:i0 + step, None] - X[None, :]
            out[i0:i0 + step] = (diff / (np.abs(diff) + eps) ** kernel.kappa) @ w
        return kernel.sign * out
    out = np.zeros(len(x))
    step = max(1, 2_000_000 // len(X))
    for i0 in range(0, len(x), step):
        out[i0:i0 + step] = np.asarray(kernel(t, x[i0:i0 + step, None], X[None, :]), float) @ w
    return out


# ---------------------------------------------------------------------------
# Simulation.

def sample_initial(xi, n, rng):
    """n draws from an atom measure or a piecewise-constant grid density."""
    pts, w = xi.support_points()
    w = np.clip(w, 0.0, None)
    idx = rng.choice(len(w), size=n, p=w / w.sum())
    if xi.kind == "atoms":
        return pts[idx].copy()
    h = xi.h
    return pts[idx] + (rng.random((n, xi.dim)) - 0.5) * h


def _drift(coeffs, t, X, m, eps, scheme):
    special = getattr(coeffs, "b_particles", None)
    if special is not None:
        return special(t, X, m, eps, scheme)
    return coeffs.b(t, X, m)


def simulate(scenario, pcfg):
    """Euler-Maruyama particle system; records the particle cloud at the
    step nearest each requested time."""
    coeffs = scenario.coefficients
    if coeffs.d != 1:
        raise DomainError("particles are simulated in d = 1")
    rng = np.random.Generator(np.random.Philox(key=int(pcfg.seed)))
    width = scenario.box[1] - scenario.box[0]
    eps = pcfg.eps_moll if pcfg.eps_moll is not None else 2.0 * width / scenario.cells
    escape = pcfg.escape_factor * 0.5 * width
    center = 0.5 * (scenario.box[0] + scenario.box[1])
    rec = np.asarray(sorted(pcfg.record_times), float)
    steps = np.maximum(np.rint(rec / pcfg.dt).astype(int), 0)
    n_steps = int(steps.max()) if len(steps) else 0
    X = sample_initial(scenario.xi, pcfg.N, rng)
    out, times = [], []
    want = {int(s): [] for s in steps}
    for k in range(n_steps + 1):
        if k in want:
            out.append(X.copy())
            times.append(k * pcfg.dt)
        if k == n_steps:
            break
        t = k * pcfg.dt
        m = Measure.atoms(X)
        b = _drift(coeffs, t, X, m, eps, pcfg.scheme).reshape(-1)
        sig = coeffs.sigma(t, X, m)[:, 0, 0]
        Z = rng.standard_normal(pcfg.N)
        X = X + (b * pcfg.dt + sig * math.sqrt(pcfg.dt) * Z)[:, None]
        if not np.all(np.isfinite(X)) or np.abs(X - center).max() > escape:
            raise ParticleBlowup("particle left the escape radius", step=k + 1,
                                 escape_radius=escape)
    return EmpiricalFlow(np.asarray(times), out, {"eps_moll": eps, "dt": pcfg.dt, "N": pcfg.N,
                                                  "seed": pcfg.seed, "scheme": pcfg.scheme})


def empirical_to_measure(flow, box, cells, smoothing=None, weight=None):
    """Histogram (smoothing None) or Gaussian-KDE (bandwidth = smoothing)
    cell densities per recorded time, normalized to mass 1 on the box."""
    lo, hi = float(box[0]), float(box[1])
    edges = np.linspace(lo, hi, cells + 1)
    h = (hi - lo) / cells
    ms = []
    for X in flow.particles:
        x = X[:, 0]
        inside = np.mean((x >= lo) & (x <= hi))
        if inside < 0.9:
            raise MassLoss("fewer than 90% of particles inside the box", inside=float(inside))
        if smoothing is None or smoothing <= 0:
            counts, _ = np.histogram(x, bins=edges)
            vals = counts.astype(float)
        else:
            vals = np.zeros(cells)
            for i0 in range(0, len(x), 10_000):
                xs = x[i0:i0 + 10_000]
                vals += _accel.cell_gauss(edges, xs, np.full(len(xs), float(smoothing))).sum(1)
        vals = vals / (vals.sum() * h)
        ms.append(Measure.grid([lo], [hi], [cells], vals))
    times = np.asarray(flow.times, float)
    keep = times > 0
    return MeasureFlow(times[keep], [m for m, k in zip(ms, keep) if k], weight)
