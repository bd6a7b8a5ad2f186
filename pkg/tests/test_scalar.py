import math
import pickle

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, special

from replica_decouple.errors import ConfigurationError, DomainError, NumericError
from replica_decouple.priors import (BernoulliGaussian, ContinuousPrior, DiscretePrior, GaussianPrior, LaplacePrior,
                                     prior_from_dict)
from replica_decouple.quadrature import PanelRule, Quadrature, expect_xz, gauss_hermite, z_rule
from replica_decouple.scalar import (L1, Custom, DiscreteSupport, ElasticNet, Quadratic, level_sup_bisect,
                                     scalar_map, soft_threshold, utility_from_dict, zero_utility)


def brute_prox(u, y, lam, grid):
    obj = (y - grid) ** 2 / (2 * lam) + u(grid)
    return grid[np.argmin(obj)]


class TestUtilities:
    def test_zero_is_identity(self):
        y = np.linspace(-3, 3, 7)
        assert np.array_equal(scalar_map(y, 0.3, zero_utility()), y)

    def test_quadratic_prox(self):
        assert scalar_map(2.0, 0.5, Quadratic(1.0)) == pytest.approx(2.0 / 1.5)

    def test_soft_threshold(self):
        assert np.allclose(soft_threshold(np.array([-2, -0.5, 0, 0.5, 2.0]), 1.0), [-1, 0, 0, 0, 1])
        assert np.allclose(L1(2.0).prox(np.array([3.0, -0.5]), 0.5), [2.0, 0.0])

    def test_elastic_net(self):
        assert ElasticNet(1.0, 1.0).prox(3.0, 1.0) == pytest.approx(1.0)

    def test_discrete_tie_break(self):
        u = DiscreteSupport((-1.0, 0.0, 1.0), (0.0, 0.0, 0.0))
        # y = 0.5 ties between 0 and 1; the smaller magnitude wins
        assert u.prox(0.5, 1.0) == 0.0
        assert u.prox(-0.5, 1.0) == 0.0
        assert DiscreteSupport((-1.0, 1.0), (0.0, 0.0)).prox(0.0, 1.0) == -1.0

    def test_discrete_costs_shift_boundary(self):
        u = DiscreteSupport((0.0, 1.0), (0.0, 0.3))
        # boundary 0.5 + lam * 0.3
        assert u.breakpoints(1.0) == pytest.approx((0.8,))
        assert u.prox(0.79, 1.0) == 0.0 and u.prox(0.81, 1.0) == 1.0

    def test_discrete_off_support_infinite(self):
        u = DiscreteSupport((1.0, -1.0), (0.0, 0.5))
        assert u(np.array([1.0, -1.0, 0.0])).tolist() == [0.0, 0.5, math.inf]

    def test_bad_parameters(self):
        with pytest.raises(ConfigurationError):
            Quadratic(-1)
        with pytest.raises(ConfigurationError):
            DiscreteSupport((1.0, 1.0), (0.0, 0.0))
        with pytest.raises(ConfigurationError):
            utility_from_dict({"kind": "huber"})
        with pytest.raises(DomainError):
            scalar_map(1.0, 0.0, L1())

    @pytest.mark.parametrize("u", [Quadratic(0.7), L1(1.3), ElasticNet(0.4, 2.0),
                                   DiscreteSupport((-2.0, 0.0, 1.0, 3.0), (0.1, 0.0, 0.4, 0.2))])
    def test_prox_is_global_minimizer(self, u):
        fine = np.linspace(-6, 6, 240001)
        if isinstance(u, DiscreteSupport):
            fine = np.asarray(u.values)
        for y in np.linspace(-5, 5, 23):
            assert u.prox(y, 0.8) == pytest.approx(brute_prox(u, y, 0.8, fine), abs=1e-4)

    @pytest.mark.parametrize("u", [Quadratic(0.7), L1(1.3), ElasticNet(0.4, 2.0),
                                   DiscreteSupport((-2.0, 0.0, 1.0, 3.0), (0.1, 0.0, 0.4, 0.2))])
    @pytest.mark.parametrize("strict", [False, True])
    def test_level_sup_matches_bisection(self, u, strict):
        t = np.array([-2.5, -2.0, -0.3, 0.0, 0.5, 1.0, 2.9, 3.0, 4.0])
        got = u.level_sup(t, 0.8, strict)
        ref = level_sup_bisect(u, t, 0.8, strict)
        assert np.allclose(got, ref, atol=1e-9, equal_nan=False)

    @given(st.floats(-10, 10), st.floats(-10, 10), st.floats(0.01, 5), st.floats(0, 3), st.floats(0, 3))
    @settings(max_examples=200, deadline=None)
    def test_prox_monotone(self, y1, y2, lam, a1, a2):
        u = ElasticNet(a1, a2)
        lo, hi = sorted((y1, y2))
        assert u.prox(lo, lam) <= u.prox(hi, lam)
        d = DiscreteSupport((-1.0, 0.0, 2.0), (a1, 0.0, a2))
        assert d.prox(lo, lam) <= d.prox(hi, lam)

    def test_custom_nonconvex_global(self):
        u = Custom(lambda v: np.minimum((v - 1) ** 2, (v + 1) ** 2 + 0.2), bracket=(-4, 4))
        y = np.array([-3.0, -0.5, 0.0, 0.5, 3.0])
        fine = np.linspace(-4, 4, 400001)
        ref = [brute_prox(u, yi, 0.5, fine) for yi in y]
        assert np.allclose(u.prox(y, 0.5), ref, atol=1e-4)
        with pytest.raises(ConfigurationError):
            Custom(lambda v: v, bracket=None)
        with pytest.raises(ConfigurationError):
            u.to_dict()

    @pytest.mark.parametrize("d", [{"kind": "zero"}, {"kind": "quadratic", "alpha": 2.0}, {"kind": "l1", "alpha": 0.5},
                                   {"kind": "elastic-net", "alpha1": 0.5, "alpha2": 0.25},
                                   {"kind": "discrete-support", "values": [0, 1], "costs": [0, 0.5]}])
    def test_dict_round_trip(self, d):
        u = utility_from_dict(d)
        assert utility_from_dict(u.to_dict()) == u


class TestPriors:
    @pytest.mark.parametrize("prior", [GaussianPrior(0.3, 2.0), DiscretePrior((-1.0, 2.0), (0.25, 0.75)),
                                       BernoulliGaussian(0.2, 3.0), LaplacePrior(0.7)])
    def test_quadrature_moments_match_closed_form(self, prior):
        x, p = prior.nodes()
        assert p.sum() == pytest.approx(1.0, abs=1e-12)
        for ell in range(1, 7):
            assert float(p @ x ** ell) == pytest.approx(prior.moment(ell), rel=1e-9, abs=1e-12)

    def test_laplace_moments(self):
        prior = LaplacePrior(0.7)
        for ell in (2, 4, 6):
            assert prior.moment(ell) == pytest.approx(math.factorial(ell) * 0.7 ** ell, rel=1e-9)

    def test_bernoulli_gaussian_moment(self):
        assert BernoulliGaussian(0.1, 2.0).moment(4) == pytest.approx(0.1 * 3 * 4.0)
        assert BernoulliGaussian(0.1, 2.0).second_moment == pytest.approx(0.2)

    @pytest.mark.parametrize("prior", [GaussianPrior(0.3, 2.0), DiscretePrior((-1.0, 2.0), (0.25, 0.75)),
                                       BernoulliGaussian(0.2, 3.0), LaplacePrior(0.7)])
    def test_sampling_matches_moments(self, prior, rng):
        x = prior.sample(200000, rng)
        m2 = prior.second_moment
        sd = math.sqrt((prior.moment(4) - m2 ** 2) / x.size)
        assert abs(np.mean(x ** 2) - m2) < 5 * sd

    def test_continuous_prior_truncated_normal(self):
        prior = ContinuousPrior(lambda x: -x * x / 2, (0.0, 12.0), order=201)
        assert prior.moment(1) == pytest.approx(math.sqrt(2 / math.pi), rel=1e-9)
        assert prior.point_masses()[0].size == 0

    def test_point_masses(self):
        v, p = BernoulliGaussian(0.3).point_masses()
        assert v.tolist() == [0.0] and p[0] == pytest.approx(0.7)
        assert GaussianPrior().point_masses()[0].size == 0
        assert DiscretePrior((0.0, 1.0), (0.5, 0.5)).point_masses()[1].tolist() == [0.5, 0.5]

    def test_bad_priors(self):
        with pytest.raises(ConfigurationError):
            DiscretePrior((0.0, 1.0), (0.5, 0.6))
        with pytest.raises(ConfigurationError):
            BernoulliGaussian(0.0)
        with pytest.raises(ConfigurationError):
            prior_from_dict({"kind": "cauchy"})

    def test_laplace_pickles(self):
        prior = pickle.loads(pickle.dumps(LaplacePrior(0.7, order=101)))
        assert prior.scale == 0.7 and prior.moment(2) == pytest.approx(2 * 0.49, rel=1e-9)

    @pytest.mark.parametrize("d", [{"kind": "gaussian", "mean": 0.5, "variance": 2.0},
                                   {"kind": "discrete", "values": [-1, 1], "probs": [0.5, 0.5]},
                                   {"kind": "bernoulli-gaussian", "sparsity": 0.1},
                                   {"kind": "laplace", "scale": 0.7}])
    def test_dict_round_trip(self, d):
        prior = prior_from_dict(d)
        assert prior_from_dict(prior.to_dict()).to_dict() == prior.to_dict()


class TestQuadrature:
    def test_gauss_hermite_moments(self):
        q = gauss_hermite(61)
        for k in range(0, 17):
            exact = 0.0 if k % 2 else special.factorial2(k - 1) if k else 1.0
            scale = special.factorial2(k + (k % 2) - 1) if k else 1.0  # magnitude of the summed terms
            assert q.integrate(lambda z: z ** k) == pytest.approx(exact, rel=1e-11, abs=1e-14 * scale)

    def test_order_limits(self):
        with pytest.raises(ConfigurationError):
            gauss_hermite(201)
        with pytest.raises(ConfigurationError):
            gauss_hermite(0)
        with pytest.raises(ConfigurationError):
            Quadrature(np.zeros(2), np.array([1.0, -0.1]))

    def test_expect_xz(self):
        prior = DiscretePrior((-1.0, 2.0), (0.25, 0.75))
        val = expect_xz(lambda x, z: (x + 0.5 * z) ** 2, prior, gauss_hermite(21))
        assert val == pytest.approx(0.25 + 0.75 * 4 + 0.25)

    def test_expect_xz_nonfinite(self):
        with pytest.raises(NumericError), np.errstate(divide="ignore"):
            expect_xz(lambda x, z: np.log(z * 0.0), GaussianPrior(), gauss_hermite(5))

    def test_panel_rule_kinked_integrand(self):
        # E|z - 0.3| has a closed form; Gauss-Hermite alone is only ~1e-4 accurate here
        exact = 2 * math.exp(-0.045) / math.sqrt(2 * math.pi) + 0.3 * (2 * special.ndtr(0.3) - 1)
        Z, W = PanelRule().rows(np.array([[0.3]]))
        assert float(W[0] @ np.abs(Z[0] - 0.3)) == pytest.approx(exact, abs=1e-13)
        Z, W = PanelRule().rows(np.array([[np.nan]]))
        assert float(W[0] @ np.abs(Z[0] - 0.3)) == pytest.approx(exact, abs=1e-2)

    def test_z_rule_places_kinks(self):
        x = np.array([0.0, 1.0])
        Z, W = z_rule(x, 0.5, L1(1.0), 0.2, PanelRule())
        for i, xi in enumerate(x):
            f = np.abs(xi + 0.5 * Z[i]) > 0.2
            exact = special.ndtr((-0.2 - xi) / 0.5) + special.ndtr((xi - 0.2) / 0.5)
            assert float(W[i] @ f) == pytest.approx(exact, abs=1e-13)

    def test_panel_vs_quad(self):
        val, _ = integrate.quad(lambda z: math.exp(-z * z / 2) / math.sqrt(2 * math.pi) * max(z - 1.1, 0) ** 3,
                                1.1, 12)
        Z, W = PanelRule().rows(np.array([[1.1]]))
        assert float(W[0] @ np.maximum(Z[0] - 1.1, 0) ** 3) == pytest.approx(val, rel=1e-11)
