import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad
from scipy.special import ndtr

from mkvflow import scenarios
from mkvflow.errors import DomainError, NoEnvelope
from mkvflow.parametrix import (CoefficientField, KernelGrid, SeriesConfig, compose_kernels,
                                det_perturbation_check, frozen_gaussian, heat_kernel,
                                heat_kernel_exact, kernel_stability, parametrix_term,
                                spacetime_convolve, verify_holder, verify_two_sided)
from mkvflow.particles import ParticleSystemConfig, simulate
from mkvflow.measures import Measure, rebin, tv_distance
from mkvflow.verify import scenario_kernel


def holder_field(amp=0.3, alpha=0.5):
    def a(t, x):
        return 0.5 * (1.0 + amp * np.abs(np.sin(x[:, 0])) ** alpha)
    return CoefficientField(a, None, 1, Lam=2.0, alpha=alpha, N1=0.5 * amp, name="holder")


def gauss(x, y, var):
    return np.exp(-(x - y) ** 2 / (2 * var)) / np.sqrt(2 * np.pi * var)


@pytest.fixture(scope="module")
def holder_kernel():
    return heat_kernel(holder_field(), cells=64, x_nodes=np.array([-1.0, -0.25, 0.25, 1.0]))


@pytest.fixture(scope="module")
def p():
    return heat_kernel(CoefficientField.constant(0.5), t_nodes=[0.25, 0.5, 1.0],
                       x_nodes=np.array([0.0, 0.5]), cells=64)


class TestFrozenGaussian:
    @given(st.floats(-2, 2), st.floats(-2, 2), st.floats(0.05, 1.0), st.floats(0.2, 2.0))
    def test_constant_a(self, x, y, t, a):
        c = CoefficientField.constant(a)
        assert frozen_gaussian(c, 0.0, x, t, y) == pytest.approx(gauss(x, y, 2 * a * t), rel=1e-12)

    def test_order(self):
        with pytest.raises(DomainError):
            frozen_gaussian(CoefficientField.constant(0.5), 0.5, 0.0, 0.5, 0.0)


class TestParametrixTerm:
    def test_constant_vanishes(self):
        c = CoefficientField.constant(0.7)
        x = np.linspace(-2, 2, 9)
        assert np.all(parametrix_term(c, 0.0, x, 0.5, 0.3 * np.ones(9)) == 0.0)

    @given(st.floats(-2, 2), st.floats(-2, 2), st.floats(0.05, 1.0), st.floats(-3, 3))
    def test_constant_drift(self, x, y, t, c):
        # d/dx of exp(-(x-y)^2/(4A))/sqrt(4 pi A) is -(x-y)/(2A) p0, with A = a t
        a = 0.5
        f = CoefficientField.constant(a, c)
        A = a * t
        want = c * (-(x - y) / (2 * A)) * gauss(x, y, 2 * A)
        assert parametrix_term(f, 0.0, x, t, y) == pytest.approx(want, rel=1e-10, abs=1e-300)

    @given(st.floats(-3, 3), st.floats(0.05, 1.0))
    def test_diagonal(self, x, t):
        assert parametrix_term(holder_field(), 0.0, x, t, x) == 0.0


class TestHeatKernel:
    def test_collapse(self):
        c = CoefficientField.constant(0.5)
        k = heat_kernel(c, cells=64, n_x=16)
        ex = heat_kernel_exact(0.5, 0.0, k.t_nodes, k.x_nodes[:, 0], (-4.0, 4.0), 64)
        pos = ex.values > 1e-300
        assert (np.abs(k.values - ex.values)[pos] / ex.values[pos]).max() <= 1e-6
        assert max(max(s[1:]) for s in k.meta["term_sup"]) < 1e-12

    def test_mass(self, holder_kernel):
        m = holder_kernel.mass()
        assert np.all(np.abs(m - 1) <= 0.01)

    def test_term_decay(self, holder_kernel):
        assert holder_kernel.meta["term_ratio"] <= 0.5

    def test_symmetry(self, holder_kernel):
        # a even in x, b = 0: p(0, x; t, y) = p(0, -x; t, -y); x nodes are symmetric pairs
        v = holder_kernel.values
        assert np.abs(v - v[::-1, :, ::-1]).max() <= 1e-6 * v.max()

    def test_window_composition(self):
        f = holder_field()
        x = np.array([-0.5, 0.5])
        full = heat_kernel(f, SeriesConfig(T_window=1.0), x_nodes=x, cells=64)
        half = heat_kernel(f, SeriesConfig(T_window=0.5), x_nodes=x, cells=64)
        assert np.abs(full.values - half.values).max() <= 2e-3 * full.values.max()

    def test_singular_drift_mass(self):
        sc = scenarios.build("singular_drift")
        k = scenario_kernel(sc, n_x=8)
        assert np.all(np.abs(k.mass() - 1) <= 0.01)
        k2 = scenario_kernel(scenarios.build("singular_drift", cells=2 * sc.cells), n_x=8)
        assert np.abs(k2.mass() - k.mass()).max() <= 0.01

    @pytest.mark.slow
    def test_against_particles(self):
        sc = scenarios.build("holder_diffusion", xi=("dirac", 0.0))
        k = heat_kernel(holder_field(), t_nodes=[0.5, 1.0], x_nodes=np.array([0.0]), box=sc.box,
                        cells=sc.cells)
        E = simulate(sc, ParticleSystemConfig(N=100_000, dt=0.0025, seed=3, record_times=(0.5, 1.0)))
        for j, X in enumerate(E.particles):
            hist = rebin(Measure.atoms(X), [sc.box[0]], [sc.box[1]], [32])
            dens = rebin(Measure.grid([sc.box[0]], [sc.box[1]], [sc.cells], k.values[0, j]),
                         [sc.box[0]], [sc.box[1]], [32])
            assert tv_distance(hist, dens) <= 0.02


class TestConvolution:
    def test_zero(self, p):
        out = spacetime_convolve(p, lambda tau, z, t, y: np.zeros(np.broadcast(z, y).shape))
        assert np.all(out.values == 0.0)

    def test_separable(self, p):
        # q = c: the result is c int_s^t P(N(x, tau) in box) dtau in every y cell
        c = 0.75
        out = spacetime_convolve(p, lambda tau, z, t, y: np.full(np.broadcast(z, y).shape, c))
        for i, x in enumerate(p.x_nodes[:, 0]):
            for j, t in enumerate(p.t_nodes):
                inside = lambda tau: ndtr((4 - x) / math.sqrt(tau)) - ndtr((-4 - x) / math.sqrt(tau))
                want = c * quad(inside, 0.0, t, epsabs=1e-14, epsrel=1e-13)[0]
                assert np.allclose(out.values[i, j], want, rtol=1e-6)

    def test_chapman_kolmogorov(self):
        box, cells = (-8.0, 8.0), 256
        y = -8 + (np.arange(cells) + 0.5) * 16 / cells
        x = np.array([-0.5, 0.0, 1.0])
        p1 = heat_kernel_exact(0.5, 0.0, [0.4], x, box, cells)
        p2 = heat_kernel_exact(0.5, 0.4, [1.0], y, box, cells)
        full = heat_kernel_exact(0.5, 0.0, [1.0], x, box, cells)
        comp = compose_kernels(p1, p2)
        assert np.abs(comp.values - full.values).max() <= 1e-6 * full.values.max()


class TestTwoSided:
    def exact(self):
        return heat_kernel_exact(0.5, 0.0, np.arange(1, 17) / 16, np.linspace(-2, 2, 16), (-4, 4), 64)

    def test_exact_rate(self):
        rep = verify_two_sided(self.exact())
        for k in ("rate_upper", "rate_lower"):
            assert abs(rep[k] - 0.5) <= 0.05
        assert rep.fitted_C < 50

    @given(st.floats(0.1, 10.0))
    @settings(max_examples=10, deadline=None)
    def test_scaling(self, c):
        k = self.exact()
        base = verify_two_sided(k)
        k2 = KernelGrid(k.s, k.t_nodes, k.x_nodes, k.y_box, c * k.values)
        rep = verify_two_sided(k2)
        assert rep["rate_upper"] == pytest.approx(base["rate_upper"], rel=1e-9)
        assert rep["rate_lower"] == pytest.approx(base["rate_lower"], rel=1e-9)
        assert rep.fitted_C <= max(c, 1 / c) * base.fitted_C * (1 + 1e-9)

    def test_zero_cell(self):
        k = self.exact()
        k.values[0, -1, 32] = 0.0
        with pytest.raises(NoEnvelope):
            verify_two_sided(k)


class TestHolder:
    def test_constant_in_time(self):
        vals = np.ones((2, 4, 16))
        k = KernelGrid(0.0, np.array([0.25, 0.5, 0.75, 1.0]), np.array([[0.0], [1.0]]),
                       (-2.0, 2.0, 16), vals)
        assert verify_holder(k, "time", 0.5).fitted_C == 0.0

    def test_refinement(self):
        out = []
        for cells, nt in ((64, 16), (128, 31)):
            k = heat_kernel_exact(0.5, 0.0, np.linspace(1 / 16, 1, nt), np.linspace(-1, 1, 8), (-4, 4), cells)
            out.append([verify_holder(k, ax, 0.5).fitted_C for ax in ("time", "space")])
        assert all(np.isfinite(v) for v in out[0] + out[1])
        assert abs(out[1][0] / out[0][0] - 1) < 0.05
        assert abs(out[1][1] / out[0][1] - 1) < 0.05

    def test_gamma_range(self):
        k = heat_kernel_exact(0.5, 0.0, [0.5, 1.0], [0.0], (-4, 4), 32)
        with pytest.raises(DomainError):
            verify_holder(k, "space", 0.6, alpha=0.5)


class TestStability:
    def test_identical(self):
        f = holder_field()
        rep = kernel_stability(f, f, x_nodes=np.array([0.0, 0.5]), cells=64)
        assert rep["lhs_sup"] == 0.0

    def test_drift_perturbation_scaling(self):
        base = CoefficientField.constant(0.5)

        def bumped(eps):
            f = CoefficientField.constant(0.5)
            f.b_fn = lambda t, x: np.where(np.abs(x[:, 0]) < 1, eps, 0.0)
            f.p, f.q = 4.0, math.inf
            return f
        c = []
        for eps in (0.01, 0.005):
            rep = kernel_stability(base, bumped(eps), x_nodes=np.array([-0.5, 0.0, 0.5]), cells=64,
                                   t_nodes=np.arange(1, 9) / 8)
            c.append(rep["lhs_sup"] / eps)
        assert abs(c[1] / c[0] - 1) < 0.2


class TestDeterminant:
    def test_scalar(self):
        rep = det_perturbation_check(d=1, n_samples=2000)
        assert rep.details["fitted_C_diff"] == pytest.approx(1.0, rel=1e-12)
        assert rep.passed

    def test_two_dim(self):
        rep = det_perturbation_check(d=2, Lam=4.0, a=1.0, n_samples=10_000)
        assert rep.passed and np.isfinite(rep.fitted_C)
