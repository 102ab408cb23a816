import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mkvflow.errors import GridMismatch, InvalidMeasure, MassLoss, NotProbability
from mkvflow.measures import (Measure, MeasureFlow, WeightFunction, default_times, dphi_metric,
                              gaussian_grid, phi_norm, rebin, tv_distance, wasserstein1)

# TV(N(0,1), N(0,4)): the densities cross at x0 = sqrt(8 ln 2 / 3); frozen from
# 2 (P(|N(0,1)| < x0) - P(|N(0,4)| < x0)) evaluated with math.erf.
TV_N01_N04 = 0.6453491376695373


def grid_from(vals, lo=-3.0, hi=3.0):
    vals = np.asarray(vals, float)
    return Measure.grid([lo], [hi], [len(vals)], vals)


prob_vals = st.lists(st.floats(0.0, 1.0), min_size=8, max_size=8).filter(lambda v: sum(v) > 1e-3)


def normalized(vals, lo=-3.0, hi=3.0):
    v = np.asarray(vals, float)
    h = (hi - lo) / len(v)
    return grid_from(v / (v.sum() * h), lo, hi)


class TestPhiNorm:
    def test_weights(self):
        x = np.array([[0.0], [2.0]])
        assert np.allclose(WeightFunction.one().eval(x), 1.0)
        assert np.allclose(WeightFunction.polynomial(2).eval(x), [1.0, 5.0])
        assert np.allclose(WeightFunction.exponential().eval(x), [math.e, math.exp(math.sqrt(5))])

    def test_atoms(self):
        m = Measure.atoms([[0.0], [2.0]], [0.5, -0.25])
        assert phi_norm(m) == pytest.approx(0.75)
        assert phi_norm(m, WeightFunction.polynomial(1)) == pytest.approx(0.5 + 0.25 * 3)

    def test_nonfinite_rejected(self):
        m = Measure.atoms([[0.0]], [1.0])
        m.weights[0] = np.nan
        with pytest.raises(InvalidMeasure):
            phi_norm(m)

    @given(st.integers(-8, 8), st.booleans(), st.lists(st.floats(-2, 2), min_size=1, max_size=6))
    def test_homogeneous_atoms_exact(self, k, neg, w):
        # powers of two scale without rounding, so equality is exact
        c = (-1.0 if neg else 1.0) * 2.0 ** k
        m = Measure.atoms(np.arange(len(w), dtype=float)[:, None], w)
        phi = WeightFunction.polynomial(1.5)
        assert phi_norm(m.scaled(c), phi) == abs(c) * phi_norm(m, phi)

    @given(st.floats(-5, 5, allow_subnormal=False), st.lists(st.floats(-2, 2), min_size=1, max_size=6))
    def test_homogeneous_atoms(self, c, w):
        m = Measure.atoms(np.arange(len(w), dtype=float)[:, None], w)
        phi = WeightFunction.polynomial(1.5)
        assert phi_norm(m.scaled(c), phi) == pytest.approx(abs(c) * phi_norm(m, phi), rel=1e-14, abs=1e-300)

    @given(st.floats(-5, 5), prob_vals)
    def test_homogeneous_grid(self, c, v):
        m = normalized(v)
        assert abs(phi_norm(m.scaled(c)) - abs(c) * phi_norm(m)) <= 1e-12


class TestTV:
    def test_identical(self):
        m = gaussian_grid(0, 1, -6, 6, 64)
        assert tv_distance(m, m) == 0.0

    def test_disjoint_diracs(self):
        assert tv_distance(Measure.dirac([0.0]), Measure.dirac([1.0])) == pytest.approx(2.0)

    def test_gaussians(self):
        a = gaussian_grid(0, 1, -12, 12, 1024)
        b = gaussian_grid(0, 4, -12, 12, 1024)
        assert tv_distance(a, b) == pytest.approx(TV_N01_N04, abs=1e-6)

    def test_grid_mismatch(self):
        with pytest.raises(GridMismatch):
            tv_distance(gaussian_grid(0, 1, -6, 6, 64), gaussian_grid(0, 1, -6, 6, 32))
        with pytest.raises(GridMismatch):
            tv_distance(gaussian_grid(0, 1, -6, 6, 64), Measure.dirac([0.0]))

    @settings(max_examples=50)
    @given(prob_vals, prob_vals, st.sampled_from([0.5, 1.0, 2.0]))
    def test_tv_below_phi_norm(self, u, v, p):
        a, b = normalized(u), normalized(v)
        assert tv_distance(a, b) <= phi_norm(a - b, WeightFunction.polynomial(p)) + 1e-12


class TestWasserstein:
    def test_identical(self):
        m = gaussian_grid(0, 1, -6, 6, 64)
        assert wasserstein1(m, m) == pytest.approx(0.0, abs=1e-14)

    def test_diracs(self):
        assert wasserstein1(Measure.dirac([0.0]), Measure.dirac([1.0])) == pytest.approx(1.0)

    def test_translation(self):
        # translation by 1 shifts every quantile by exactly 1
        a = gaussian_grid(0, 1, -8, 8, 512)
        b = gaussian_grid(1, 1, -8, 8, 512)
        assert wasserstein1(a, b) == pytest.approx(1.0, abs=1e-6)

    def test_signed_rejected(self):
        with pytest.raises(NotProbability):
            wasserstein1(Measure.atoms([[0.0], [1.0]], [1.5, -0.5]), Measure.dirac([0.0]))

    @settings(max_examples=50)
    @given(prob_vals, prob_vals, prob_vals)
    def test_triangle(self, u, v, w):
        a, b, c = normalized(u), normalized(v), normalized(w)
        assert wasserstein1(a, c) <= wasserstein1(a, b) + wasserstein1(b, c) + 1e-12

    @settings(max_examples=50)
    @given(prob_vals, prob_vals)
    def test_w1_below_weighted_norm(self, u, v):
        a, b = normalized(u), normalized(v)
        assert wasserstein1(a, b) <= phi_norm(a - b, WeightFunction.polynomial(1)) + 1e-12


class TestRebin:
    def test_identity(self):
        m = gaussian_grid(0.3, 0.5, -4, 4, 40)
        r = rebin(m, [-4], [4], [40])
        assert np.array_equal(r.values, m.values)

    def test_atom_binning(self):
        r = rebin(Measure.atoms([[0.5]], [1.0]), [0.0], [1.0], [2])
        assert np.allclose(r.values.ravel() * r.h[0], [0.0, 1.0])

    def test_samples(self):
        n = 100_000
        x = np.random.default_rng(0).standard_normal(n)
        r = rebin(Measure.atoms(x[:, None]), [-6], [6], [256])
        ref = gaussian_grid(0, 1, -6, 6, 256)
        tv = tv_distance(r, ref)
        # sampling-noise floor of the L1 distance: sum_i E|Bin(n, p_i)/n - p_i|
        p = ref.values.ravel() * ref.h[0]
        floor = float(np.sum(np.sqrt(2 * p * (1 - p) / (np.pi * n))))
        assert 0.8 * floor <= tv <= 1.2 * floor
        assert 0.5 * tv <= 0.02

    def test_mass_loss(self):
        with pytest.raises(MassLoss):
            rebin(Measure.atoms([[5.0]], [1.0]), [0.0], [1.0], [4])


def flow_of(vals_list, times):
    return MeasureFlow(times, [normalized(v) for v in vals_list])


class TestDphi:
    def test_identical(self):
        f = flow_of([[1] * 8] * 4, [0.25, 0.5, 0.75, 1.0])
        assert dphi_metric(f, f) == 0.0

    def test_gap_on_second_half(self):
        # flows differ only for t in [1/2, 1] with constant gap s
        times = np.array([0.25, 0.5, 0.75, 1.0])
        base = [1] * 8
        other = [2, 0, 1, 1, 1, 1, 1, 1]
        f = flow_of([base] * 4, times)
        g = flow_of([base, other, other, other], times)
        gaps = [phi_norm(b - a) for a, b in zip(f.measures, g.measures)]
        # brute force over the defining max, k = 1..ceil(1/t_1)
        want = 0.0
        for k in range(1, 5):
            sk = max(gp for t, gp in zip(times, gaps) if t >= 1.0 / k)
            want = max(want, 2.0 ** -k * sk / (1 + sk))
        assert gaps[0] == 0.0 and gaps[1] > 0
        assert dphi_metric(f, g) == pytest.approx(want, rel=1e-14)

    def test_saturation(self):
        times = np.array([0.5, 1.0])
        f = MeasureFlow(times, [Measure.dirac([0.0])] * 2)
        g = MeasureFlow(times, [Measure.atoms([[1.0]], [1e12])] * 2)
        assert dphi_metric(f, g) == pytest.approx(0.5, rel=1e-9)

    def test_misaligned(self):
        f = flow_of([[1] * 8] * 2, [0.5, 1.0])
        g = flow_of([[1] * 8] * 2, [0.25, 1.0])
        with pytest.raises(GridMismatch):
            dphi_metric(f, g)

    @settings(max_examples=40)
    @given(st.lists(prob_vals, min_size=9, max_size=9))
    def test_metric(self, vals):
        times = [0.25, 0.5, 1.0]
        a, b, c = flow_of(vals[:3], times), flow_of(vals[3:6], times), flow_of(vals[6:], times)
        assert dphi_metric(a, b) == dphi_metric(b, a)
        assert dphi_metric(a, c) <= dphi_metric(a, b) + dphi_metric(b, c) + 1e-12


def test_default_times():
    t = default_times(4)
    assert np.allclose(t, [1 / 16, 1 / 4, 9 / 16, 1])


def test_flow_validation():
    with pytest.raises(InvalidMeasure):
        MeasureFlow([0.5, 0.5], [Measure.dirac([0.0])] * 2)
    with pytest.raises(InvalidMeasure):
        MeasureFlow([0.0, 1.0], [Measure.dirac([0.0])] * 2)


def test_gaussian_grid_moments():
    m = gaussian_grid(0.5, 0.25, -6, 6, 256)
    assert m.mass() == pytest.approx(1.0, abs=1e-12)
    assert m.mean()[0] == pytest.approx(0.5, abs=1e-10)
