import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mkvflow.errors import DomainError, Divergent, IndexSetError
from mkvflow.kato import (SpaceTimeField, check_convolution_bound, check_kvsl, check_rho_vs_eta,
                          chi, chi_norm, eta_beta, in_index_set, kato_functional, lpq_norm, rho)
from mkvflow.kato import _conv_lhs

F = SpaceTimeField

# x = y = 0, b = 1, beta = beta' = 1, lam = 1, (s, t) = (0, 0.5): the z-integral is
# Gaussian, leaving int_0^t u^-1 (t-u)^-1 sqrt(pi / (1/u + 2/(t-u))) du, done with
# adaptive scipy quad at 1e-13.
CONV_ORIGIN = 6.5725236032984125
# ||chi||_{L^4(R)} by a 2e6-point trapezoid rule on the bridge [1, 2].
CHI_L4 = 1.289814292345385


class TestProfiles:
    @given(st.floats(0.01, 1.0), st.floats(0.0, 3.0), st.floats(0.0, 3.0), st.floats(0.0, 2.0))
    def test_positive_decreasing(self, t, r1, r2, beta):
        lo, hi = sorted((r1, r2))
        for f in (lambda r: eta_beta(beta, t, r, d=1), lambda r: rho(0.5, -beta, t, r, d=1)):
            assert f(lo) > 0 and f(hi) > 0
            assert f(lo) >= f(hi)

    @given(st.floats(1e-3, 1.0), st.floats(0.01, 1.0), st.floats(-2.0, 1.0), st.sampled_from([1, 2]))
    def test_rho_scaling(self, t, c, gamma, d):
        x0 = np.zeros(d)
        lhs = rho(0.7, gamma, c * t, x0)
        rhs = c ** ((-d + gamma) / 2) * rho(0.7, gamma, t, x0)
        assert abs(lhs / rhs - 1) <= 1e-12

    def test_domain(self):
        with pytest.raises(DomainError):
            eta_beta(1.0, 0.0, 0.0, d=1)
        with pytest.raises(DomainError):
            rho(0.0, 0.0, 1.0, 0.0, d=1)

    def test_chi(self):
        v = chi(np.array([0.0, 1.0, 1.5, 2.0, 3.0]))
        assert v[0] == v[1] == 1.0 and 0 < v[2] < 1 and v[3] == v[4] == 0.0
        assert chi_norm(4) == pytest.approx(CHI_L4, rel=1e-9)
        assert chi_norm(np.inf) == 1.0


class TestKato:
    @pytest.mark.parametrize("T", [0.0625, 0.25, 1.0])
    def test_constant(self, T):
        # each time direction gives int_0^T 2/sqrt(s) ds = 4 sqrt(T)
        assert kato_functional(F.constant(1.0), 1.0, T).value == pytest.approx(8 * math.sqrt(T), rel=1e-6)

    def test_unit_ball(self):
        # sup at x0 = 0; each direction: int_0^T 2 (s^-1/2 - (s^1/2 + 1)^-1) ds = 4 ln(1 + sqrt T)
        val = kato_functional(F.indicator_ball(1.0), 1.0, 0.25).value
        assert val == pytest.approx(8 * math.log(1.5), rel=1e-6)

    def test_zero(self):
        assert kato_functional(F.zero(), 1.0, 0.5).value == 0.0

    def test_divergent_tail(self):
        # eta_0 = (sqrt(s) + |y|)^-1 is not integrable in d = 1
        with pytest.raises(Divergent):
            kato_functional(F.constant(1.0), 0.0, 0.5)

    def test_bad_T(self):
        with pytest.raises(DomainError):
            kato_functional(F.constant(1.0), 1.0, 1.5)

    @settings(max_examples=4, deadline=None)
    @given(st.floats(0.2, 1.0), st.floats(0.2, 1.0), st.floats(0.05, 1.0), st.floats(0.05, 1.0))
    def test_monotone(self, r1, r2, T1, T2):
        (ra, rb), (Ta, Tb) = sorted((r1, r2)), sorted((T1, T2))
        small, big = F.indicator_ball(ra), F.indicator_ball(rb)
        assert kato_functional(small, 1.0, Ta).value <= kato_functional(big, 1.0, Ta).value + 1e-9
        assert kato_functional(small, 1.0, Ta).value <= kato_functional(small, 1.0, Tb).value + 1e-9


class TestLpq:
    def test_zero(self):
        assert lpq_norm(F.zero(), 4, 4) == 0.0

    @pytest.mark.parametrize("p,q,T", [(4, np.inf, 1.0), (4, 4, 0.5), (2, 8, 0.25)])
    def test_constant(self, p, q, T):
        c = 2.5
        want = c * chi_norm(p) * (1.0 if q == np.inf else T ** (1 / q))
        assert lpq_norm(F.constant(c), p, q, T=T) == pytest.approx(want, rel=1e-3)

    def test_power_ball_finite(self):
        # chi_0 = 1 on the whole support: (int_{-1}^{1} |x|^-0.9 dx)^(1/1.8) = 20^(1/1.8)
        assert lpq_norm(F.power_ball(0.5), 1.8, np.inf) == pytest.approx(20 ** (1 / 1.8), rel=1e-6)

    def test_power_ball_divergent(self):
        with pytest.raises(Divergent):
            lpq_norm(F.power_ball(0.5), 2, 4)

    def test_example4_threshold(self):
        # h(x) = |x|^(1-kappa): finite iff p (kappa - 1) < 1
        kappa = 1.5
        assert np.isfinite(lpq_norm(F.power_ball(kappa - 1), 1.9, np.inf))
        with pytest.raises(Divergent):
            lpq_norm(F.power_ball(kappa - 1), 2.0, np.inf)

    @settings(max_examples=10, deadline=None)
    @given(st.floats(0.3, 2.0), st.floats(0.3, 2.0), st.floats(0.1, 3.0), st.floats(0.1, 3.0))
    def test_triangle(self, r1, r2, c1, c2):
        f = F.indicator_ball(r1, value=c1)
        g = F.indicator_ball(r2, value=c2)
        assert lpq_norm(f + g, 4, 4) <= (lpq_norm(f, 4, 4) + lpq_norm(g, 4, 4)) * (1 + 1e-5)


class TestCertifiers:
    def test_rho_eta_unit_point(self):
        assert check_rho_vs_eta(1.0, 0.0, ([1.0], [0.0])).fitted_C == pytest.approx(1.0, rel=1e-15)

    @given(st.floats(1e-4, 1.0), st.floats(0.0, 2.0))
    def test_rho_eta_origin_ray(self, t, beta):
        assert check_rho_vs_eta(1.0, beta, ([t], [0.0])).fitted_C == pytest.approx(1.0, rel=1e-12)

    def test_rho_eta_refinement(self):
        c1 = check_rho_vs_eta(1.0, 1.0).fitted_C
        t = np.logspace(-4, 0, 400)
        r = np.concatenate([[0.0], np.logspace(-4, 1.5, 399)])
        T, R = np.meshgrid(t, r, indexing="ij")
        c4 = check_rho_vs_eta(1.0, 1.0, (T.ravel(), R.ravel())).fitted_C
        assert np.isfinite(c1) and abs(c4 / c1 - 1) < 0.05

    def test_index_set(self):
        assert in_index_set(1.0, 4, 4)
        assert not in_index_set(1.0, 2, 2)
        with pytest.raises(IndexSetError):
            check_kvsl(F.constant(1.0), 1.0, 2, 2, [0.01, 1.0])

    def test_kvsl_constant(self):
        rep = check_kvsl(F.constant(1.0), 1.0, np.inf, np.inf, np.logspace(-2, 0, 5))
        assert rep.slope == pytest.approx(0.5, abs=0.05)
        assert rep.slope_expected == 0.5

    def test_kvsl_zero(self):
        rep = check_kvsl(F.zero(), 1.0, 4, 4, [0.01, 0.1, 1.0])
        assert rep.zero_field and math.isnan(rep.slope)

    def test_convolution_zero(self):
        rep = check_convolution_bound(F.zero(), 1.0, 1.0, 1.0, 0.0, 0.5)
        assert rep.fitted_C == 0.0 and rep["lhs_max"] == 0.0

    def test_convolution_constant(self):
        rep = check_convolution_bound(F.constant(1.0), 1.0, 1.0, 1.0, 0.0, 0.5)
        assert np.isfinite(rep.fitted_C) and rep["drift"] < 0.05

    def test_convolution_origin(self):
        lhs = _conv_lhs(F.constant(1.0), 1.0, 1.0, 1.0, 0.0, 0.5, 0.0, 0.0, 12, 24)
        assert lhs == pytest.approx(CONV_ORIGIN, rel=1e-10)

    def test_convolution_order(self):
        with pytest.raises(DomainError):
            check_convolution_bound(F.constant(1.0), 0.5, 1.0, 1.0, 0.0, 0.5)
