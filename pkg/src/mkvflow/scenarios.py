"""Registry of pinned coefficient families.

Every builder returns a complete ScenarioConfig.  Coefficients are composed
from a small algebra: constants, Holder bumps, pairwise kernels and scalar
interactions <p, m>.  Grid measures are paired exactly where the family
allows it (indicator masses, power-kernel cell integrals); atom measures
(particles) use direct sums, with a cap for singular kernels.
"""
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from . import _accel
from .errors import ParamOutOfRange, UnknownScenario
from .measures import Measure, MeasureFlow, WeightFunction, default_times, gaussian_grid
from .mkv import MkvCoefficients, ScenarioConfig
from .parametrix import SeriesConfig
from .particles import PowerKernel, interaction_eval


# ---------------------------------------------------------------------------
# Pairing primitives.

def ball_mass(m, r):
    """m({|y| <= r}) in d = 1; exact for piecewise-constant grid densities."""
    if m.kind == "atoms":
        return float(m.weights[np.abs(m.points[:, 0]) <= r].sum())
    e = m.edges()[0]
    over = np.clip(np.minimum(e[1:], r) - np.maximum(e[:-1], -r), 0.0, None)
    return float((m.values.ravel() * over).sum())


def power_kernel_sum(x, m, kappa, eps=None):
    """int (x - y) / |x - y|^kappa m(dy), d = 1.

    Grid densities: exact cell integrals via the primitive |u|^(2-kappa)/(2-kappa).
    Atoms: direct sum with |x - y| capped below at eps.
    """
    x = np.asarray(x, float).reshape(-1)
    if m.kind == "atoms":
        eps = 1e-3 if eps is None else eps
        return _accel.pair_power_sum(x[:, None], m.points, m.weights, kappa, eps)[:, 0]
    e = m.edges()[0]
    F = np.abs(x[:, None] - e[None, :]) ** (2.0 - kappa) / (2.0 - kappa)
    cell = F[:, :-1] - F[:, 1:]
    return cell @ m.values.ravel()


def gauss_kernel_sum(x, m, ell):
    """int exp(-(x - y)^2 / (2 ell^2)) m(dy) with cell-center quadrature on grids."""
    pts, w = m.support_points()
    return _accel.pair_gauss_sum(np.asarray(x, float).reshape(-1, 1), pts, w, ell)


# ---------------------------------------------------------------------------
# Example 3 constants.

def example3_constants():
    c1 = float(erf(2.0 / math.sqrt(2.0)))
    c2 = float(erf(1.0 / math.sqrt(2.0)))
    lam1 = (2 * c1 - c2 - 1) / (c1 - c2)
    lam2 = (2 * c1 - c2) / (c1 - c2)
    return {"c1": c1, "c2": c2, "lambda1": lam1, "lambda2": lam2}


def example3_flows(scenario):
    """Grid flows of [W_t] and [2 W_t] on the scenario grid and time nodes."""
    lo, hi, n = scenario.box[0], scenario.box[1], scenario.cells
    w1 = [gaussian_grid(0.0, t, [lo], [hi], [n]) for t in scenario.times]
    w2 = [gaussian_grid(0.0, 4.0 * t, [lo], [hi], [n]) for t in scenario.times]
    return (MeasureFlow(scenario.times, w1, scenario.weight, s_phi=True),
            MeasureFlow(scenario.times, w2, scenario.weight, s_phi=True))


# ---------------------------------------------------------------------------
# Builders.

def _check(name, ok, value, rng):
    if not ok:
        raise ParamOutOfRange(f"{name}={value} outside {rng}", param=name, value=value)


def _gaussian_xi(mean, var, box, cells):
    return gaussian_grid(mean, var, [box[0]], [box[1]], [cells])


def _constant(params):
    sig = float(params.get("sigma", 1.0))
    b = float(params.get("b", 0.0))
    _check("sigma", sig > 0, sig, "(0, inf)")
    a = 0.5 * sig * sig
    coeffs = MkvCoefficients(
        lambda t, x, m: np.full(len(x), sig),
        (lambda t, x, m: np.full(len(x), b)) if b != 0 else None,
        Lam=max(a, 1.0 / a, 1.0), alpha=1.0, N2=abs(b), m_independent=True,
        a_space_constant=True, name=f"constant(sigma={sig}, b={b})")
    return coeffs, {"box": (-6.0, 6.0), "cells": 256, "xi": ("gaussian", 0.0, 0.25)}


def _ou(params):
    theta = float(params.get("theta", 1.0))
    sig = float(params.get("sigma", 1.0))
    _check("theta", theta >= 0, theta, "[0, inf)")
    a = 0.5 * sig * sig
    coeffs = MkvCoefficients(
        lambda t, x, m: np.full(len(x), sig), lambda t, x, m: -theta * x[:, 0],
        Lam=max(a, 1.0 / a, 1.0), N2=6.0 * theta, m_independent=True, a_space_constant=True,
        name=f"ou(theta={theta})")
    # |b| reaches 4 at the walls: long windows leave a series tail that dips below zero
    return coeffs, {"box": (-4.0, 4.0), "cells": 128, "xi": ("gaussian", 0.0, 0.25),
                    "series": SeriesConfig(T_window=0.125)}


def _holder(params):
    alpha = float(params.get("alpha", 0.5))
    amp = float(params.get("amp", 0.3))
    _check("alpha", 0 < alpha <= 1, alpha, "(0, 1]")
    _check("amp", 0 <= amp < 1, amp, "[0, 1)")

    def sigma(t, x, m):
        return np.sqrt(1.0 + amp * np.abs(np.sin(x[:, 0])) ** alpha)
    coeffs = MkvCoefficients(sigma, None, Lam=2.0, alpha=alpha, N1=0.5 * amp,
                             m_independent=True, name=f"holder(alpha={alpha})")
    return coeffs, {"box": (-6.0, 6.0), "cells": 128, "xi": ("gaussian", 0.0, 0.25)}


def _singular(params):
    a_exp = float(params.get("exponent", 0.25))
    _check("exponent", 0 <= a_exp < 1, a_exp, "[0, 1)")

    def b(t, x, m):
        r = np.abs(x[:, 0])
        with np.errstate(divide="ignore"):
            return np.where(r < 1.0, r ** (-a_exp), 0.0)
    # |x|^-a 1_B1 lies in L^p for p a < 1; take p midway, q = inf
    p = 0.5 * (1.0 + 1.0 / a_exp) if a_exp > 0 else math.inf
    coeffs = MkvCoefficients(lambda t, x, m: np.ones(len(x)), b, Lam=2.0, N2=1.0, p=p,
                             m_independent=True, a_space_constant=True, singular_points=(0.0,),
                             name=f"singular_drift(exponent={a_exp})")
    return coeffs, {"box": (-6.0, 6.0), "cells": 128, "xi": ("gaussian", 0.0, 0.25)}


def _example1(params):
    alpha = float(params.get("alpha", 0.5))
    _check("alpha", 0 < alpha <= 1, alpha, "(0, 1]")
    g = lambda y: np.cos(y[:, 0])
    h = lambda y: np.tanh(y[:, 0])

    def sigma(t, x, m):
        return 1.0 + 0.5 * math.tanh(float(m.pair(g))) + 0.2 * np.abs(np.sin(x[:, 0])) ** alpha

    def b(t, x, m):
        return -0.5 * np.tanh(x[:, 0] - float(m.pair(h)))

    def lfd_a(t, x, m, y):
        c = float(m.pair(g))
        s = sigma(t, x, m)
        dsig = 0.5 * (1.0 - math.tanh(c) ** 2) * (np.cos(y[:, 0]) - c)
        return s[:, None] * dsig[None, :]

    # sigma in [0.62, 1.78]: a in [0.19, 1.6]
    coeffs = MkvCoefficients(sigma, b, lfd_a, Lam=5.5, alpha=alpha, N1=0.4, N2=0.5,
                             beta=1.0, ell=1.0, modulus=1.0, name="example1")
    return coeffs, {"box": (-6.0, 6.0), "cells": 256, "xi": ("gaussian", 0.5, 0.25)}


def _example2(params):
    alpha = float(params.get("alpha", 0.5))
    _check("alpha", 0 < alpha <= 1, alpha, "(0, 1]")
    p1 = lambda y: y[:, 0]
    q1 = lambda y: y[:, 0] ** 2

    def sig_bar(x, v):
        return 1.0 + 0.3 * np.tanh(v) + 0.2 * np.abs(np.sin(x)) ** alpha

    def b_bar(x, v):
        return -np.tanh(x) / (1.0 + v)

    coeffs = MkvCoefficients(
        lambda t, x, m: sig_bar(x[:, 0], float(m.pair(p1))),
        lambda t, x, m: b_bar(x[:, 0], float(m.pair(q1))),
        lambda t, x, m, y: (sig_bar(x[:, 0], float(m.pair(p1)))
                            * 0.3 / math.cosh(float(m.pair(p1))) ** 2)[:, None]
        * (y[:, 0] - float(m.pair(p1)))[None, :],
        Lam=3.0, alpha=alpha, N1=0.4, N2=1.0, beta=1.0, name="example2")
    coeffs.sig_bar, coeffs.b_bar, coeffs.p_fns, coeffs.q_fns = sig_bar, b_bar, (p1,), (q1,)
    return coeffs, {"box": (-6.0, 6.0), "cells": 256, "xi": ("gaussian", 0.0, 0.25)}


def _example3(params):
    k = example3_constants()
    l1, l2 = k["lambda1"], k["lambda2"]

    def sig_m(t, m):
        inner = ball_mass(m, 2.0 * math.sqrt(t))
        return l1 * inner + l2 * (m.mass() - inner)

    def Sigma(t, y):
        return np.where(np.abs(y) <= 2.0 * math.sqrt(t), l1, l2)

    def lfd_a(t, x, m, y):
        # sigma(m) through the same pairing the normalization uses
        s = float(m.pair(lambda p: Sigma(t, p[:, 0])))
        return np.broadcast_to(s * (Sigma(t, y[:, 0]) - s), (len(x), len(y)))

    coeffs = MkvCoefficients(lambda t, x, m: np.full(len(x), sig_m(t, m)), None, lfd_a,
                             Lam=max(0.5 * l2 * l2, 2.0 / (l1 * l1)), alpha=1.0, N1=0.0,
                             beta=0.0, ell=l2 - l1, modulus=l2 - l1, a_space_constant=True,
                             name="example3")
    coeffs.sigma_of_measure = sig_m
    coeffs.constants = k
    return coeffs, {"box": (-12.0, 12.0), "cells": 2048, "xi": ("dirac", 0.0)}


def example4_pq(kappa):
    """(p, q) for |x|^(1-kappa) in d = 1: finite local L^p needs p (kappa - 1) < 1."""
    if kappa <= 1.0:
        return 4.0, math.inf
    return min(4.0, 0.9 / (kappa - 1.0)), math.inf


def _example4(params):
    kappa = float(params.get("kappa", 1.5))
    sign = int(params.get("sign", 1))
    amp = float(params.get("amp", 0.3))
    eps = params.get("eps_moll")
    _check("kappa", 1.0 <= kappa < 2.0, kappa, "[1, 2)")
    _check("sign", sign in (1, -1), sign, "{-1, +1}")

    def Sig(x, y):
        return 1.0 + amp * np.exp(-0.5 * (x - y) ** 2)

    def sigma(t, x, m):
        return 1.0 + amp * gauss_kernel_sum(x[:, 0], m, 1.0)

    def b(t, x, m):
        return sign * power_kernel_sum(x[:, 0], m, kappa, eps)

    def lfd_a(t, x, m, y):
        s = sigma(t, x, m)
        return s[:, None] * (Sig(x[:, 0][:, None], y[:, 0][None, :]) - s[:, None])

    p, q = example4_pq(kappa)
    coeffs = MkvCoefficients(sigma, b, lfd_a, Lam=2.0, alpha=1.0, N1=0.5 * amp, N2=2.0,
                             p=p, q=q, beta=1.0, ell=2.0, modulus=2.0,
                             name=f"example4(kappa={kappa}, sign={sign:+d})")
    coeffs.kappa, coeffs.sign = kappa, sign
    kern = PowerKernel(kappa, sign)
    coeffs.b_particles = lambda t, x, m, eps, scheme: interaction_eval(
        kern, m.points[:, 0], x[:, 0], eps, scheme)
    return coeffs, {"box": (-6.0, 6.0), "cells": 256, "xi": ("gaussian", 0.0, 0.5)}


@dataclass
class ScenarioLibraryEntry:
    name: str
    builder: object
    doc: str
    assumptions: dict


_A_ALL = {"A0": True, "A1": True, "A2": True, "A3": True, "A4": True}

LIBRARY = {
    "constant": ScenarioLibraryEntry("constant", _constant, "heat baseline, sigma and b constant",
                                     _A_ALL),
    "ou": ScenarioLibraryEntry("ou", _ou, "Ornstein-Uhlenbeck calibration, b = -theta x",
                               {**_A_ALL, "A1": False}),
    "holder_diffusion": ScenarioLibraryEntry("holder_diffusion", _holder,
                                             "a = (1 + amp |sin x|^alpha) / 2, b = 0", _A_ALL),
    "singular_drift": ScenarioLibraryEntry("singular_drift", _singular,
                                           "b = |x|^-e on the unit ball, sigma = 1", _A_ALL),
    "example1": ScenarioLibraryEntry(
        "example1", _example1,
        "Holder sigma continuous in m, bounded drift continuous in m", _A_ALL),
    "example2": ScenarioLibraryEntry(
        "example2", _example2, "scalar interactions <x, m>, <x^2, m>",
        {**_A_ALL, "A3": False, "A4": False}),
    "example3": ScenarioLibraryEntry(
        "example3", _example3, "nonuniqueness: sigma(t, m) = int Sigma(t, x) m(dx), xi = 0",
        {"A0": True, "A1": True, "A2": True, "A3": False, "A4": True}),
    "example4": ScenarioLibraryEntry(
        "example4", _example4, "singular interaction drift +-(x-y)/|x-y|^kappa", _A_ALL),
}


def names():
    return sorted(LIBRARY)


def _make_xi(spec, box, cells):
    kind = spec[0]
    if kind == "dirac":
        return Measure.dirac([spec[1]])
    if kind == "gaussian":
        return _gaussian_xi(spec[1], spec[2], box, cells)
    raise ParamOutOfRange(f"unknown initial law {kind}")


def build(name, params=None, **overrides):
    """ScenarioConfig for a library entry.

    ``overrides`` may set box, cells, K (number of time nodes), times, xi
    (("dirac", x) or ("gaussian", mean, var)), seed, picard, series, weight.
    """
    if name not in LIBRARY:
        raise UnknownScenario(f"unknown scenario {name!r}", known=names())
    params = dict(params or {})
    coeffs, defaults = LIBRARY[name].builder(params)
    box = tuple(float(v) for v in overrides.get("box", defaults["box"]))
    cells = int(overrides.get("cells", defaults["cells"]))
    xi_spec = tuple(overrides.get("xi", defaults["xi"]))
    if name == "example2" and xi_spec[0] not in ("gaussian", "dirac"):
        raise ParamOutOfRange("example2 needs a Gaussian or compactly supported initial law")
    times = overrides.get("times")
    times = default_times(int(overrides.get("K", 32))) if times is None else np.asarray(times, float)
    series = overrides.get("series", defaults.get("series", SeriesConfig()))
    if isinstance(series, dict):
        series = SeriesConfig(**series)
    picard = {"max_iter": 15, "tol_dphi": 1e-3, "damping": 0.5}
    picard.update(overrides.get("picard", {}))
    weight = overrides.get("weight", WeightFunction.one())
    if isinstance(weight, dict):
        weight = WeightFunction.from_dict(weight)
    cfg = ScenarioConfig(coeffs, _make_xi(xi_spec, box, cells), weight, times, box, cells,
                         series, picard, int(overrides.get("seed", 0)), name, params)
    cfg.xi_spec = xi_spec
    return cfg


def from_dict(doc):
    """Scenario from a JSON document {"name", "params", ...overrides}."""
    doc = dict(doc)
    name = doc.pop("name")
    params = doc.pop("params", {})
    if "K" not in doc and "times" not in doc:
        doc["K"] = 32
    return build(name, params, **doc)


def to_dict(cfg):
    out = cfg.to_dict()
    out["xi"] = list(getattr(cfg, "xi_spec", ()))
    return out


def assumption_matrix():
    rows = []
    for n in names():
        e = LIBRARY[n]
        rows.append({"name": n, "doc": e.doc, **e.assumptions})
    return rows
