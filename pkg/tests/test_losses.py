"""Tests for the loss ladder: the c(t) weight, time sampling, the total and
noise-prediction losses, the theta-independent floor, common-random-number
identities, and the predictor factories.
"""

import json
import math

import numpy as np
import pytest

from revdiff.core import RandomStream, SampleSet, make_schedule
from revdiff.losses import (
    TimeSampling,
    c_weight,
    constant_shift_predictor,
    eps_total_loss,
    kernel_xbar_predictor,
    nearest_atom_predictor,
    random_feature_perturbation,
    riemann_eps_loss,
    score_loss,
    total_loss,
    variance_floor,
    zero_predictor,
)
from revdiff.scores import KernelScore

TWO_ATOMS = SampleSet([[-1.0], [1.0]])
SAMPLING = TimeSampling.uniform(0.05, 4.0)

# averages over t ~ U[0.05, 4]; computed independently with 30-digit arithmetic
MEAN_INV_BETA_SQ = 1.2977003724222802  # E[1 / (1 - e^{-2t})]
MEAN_C_SQ = 1.2035438442498998         # E[c(t)^2]


class TestCWeight:
    def test_value_at_log_two(self):
        np.testing.assert_allclose(c_weight(math.log(2.0)), 2.0 / 3.0, rtol=1e-14)

    def test_small_time_growth(self):
        """c(t) ~ 1/(2t) as t -> 0."""
        np.testing.assert_allclose(c_weight(1e-6) * 2e-6, 1.0, rtol=1e-5)

    def test_monotone_decreasing(self):
        t = np.linspace(0.01, 5.0, 200)
        assert np.all(np.diff(c_weight(t)) < 0)


class TestTimeSampling:
    def test_uniform_draw_range(self):
        ts = TimeSampling.uniform(0.5, 2.0)
        draws = ts.draw(np.random.default_rng(0), 1000)
        assert draws.min() >= 0.5 and draws.max() <= 2.0

    def test_grid_draws_from_grid(self):
        ts = TimeSampling.from_grid([0.1, 1.0, 2.5])
        draws = ts.draw(np.random.default_rng(1), 500)
        assert set(np.unique(draws)) <= {0.1, 1.0, 2.5}

    def test_describe(self):
        assert TimeSampling.uniform(1e-4, 4.0).describe() == "uniform[0.0001,4]"
        assert TimeSampling.from_grid([0.1, 1.0, 2.5]).describe() == "grid[3 nodes]"

    def test_rejects_bad_parameters(self):
        with pytest.raises(ValueError):
            TimeSampling.uniform(2.0, 1.0)
        with pytest.raises(ValueError):
            TimeSampling.uniform(0.0, 1.0)
        with pytest.raises(ValueError):
            TimeSampling.from_grid([])
        with pytest.raises(ValueError):
            TimeSampling.from_grid([0.5, -1.0])
        with pytest.raises(ValueError):
            TimeSampling("importance")


class TestScoreLoss:
    def test_exact_field_gives_zero(self):
        ref = KernelScore(TWO_ATOMS)
        est = score_loss(ref, ref, SAMPLING, 1000, RandomStream(0))
        assert est.value == 0.0 and est.std_error == 0.0

    def test_constant_offset_has_exact_loss(self):
        """Adding c to the exact score gives |c|^2 pathwise, with zero variance."""
        ref = KernelScore(TWO_ATOMS)
        off = lambda x, t: ref.score(x, t) + 0.5
        est = score_loss(off, ref, SAMPLING, 1000, RandomStream(0))
        np.testing.assert_allclose(est.value, 0.25, rtol=1e-12)
        assert est.std_error < 1e-14

    def test_zero_field_single_atom_value(self):
        """For one atom at 0 the score is -x/beta^2, so the zero field loses
        E[X_t^2 / beta^4] = E[1 / beta^2]."""
        ref = KernelScore(SampleSet([[0.0]]))
        est = score_loss(lambda x, t: np.zeros_like(x), ref, SAMPLING, 100_000, RandomStream(3))
        assert abs(est.value - MEAN_INV_BETA_SQ) < 3.0 * est.std_error


class TestTotalLoss:
    def test_single_atom_exact_predictor_is_zero(self):
        atom = SampleSet([[2.0]])
        pred = lambda x, t: np.full_like(np.atleast_2d(x), 2.0)
        est = total_loss(pred, atom, SAMPLING, 1000, RandomStream(0))
        assert est.value == 0.0

    def test_kernel_equals_floor_pathwise(self):
        """With a shared stream the kernel total loss and the floor use the same
        draws and the same function, so the estimates are bit-identical."""
        a = total_loss(kernel_xbar_predictor(TWO_ATOMS), TWO_ATOMS, SAMPLING, 5000,
                       RandomStream(6))
        b = variance_floor(TWO_ATOMS, SAMPLING, 5000, RandomStream(6))
        assert a.value == b.value
        assert a.std_error == b.std_error

    def test_kernel_matches_floor_across_streams(self):
        a = total_loss(kernel_xbar_predictor(TWO_ATOMS), TWO_ATOMS, SAMPLING, 50_000,
                       RandomStream(1))
        b = variance_floor(TWO_ATOMS, SAMPLING, 50_000, RandomStream(2))
        assert abs(a.value - b.value) < 3.0 * (a.std_error + b.std_error)

    def test_constant_shift_excess(self):
        """Shifting the optimal predictor by delta raises the loss by exactly
        delta^2 E[c(t)^2]; common random numbers cancel the floor noise."""
        shifted = constant_shift_predictor(kernel_xbar_predictor(TWO_ATOMS), [0.1])
        tl = total_loss(shifted, TWO_ATOMS, SAMPLING, 200_000, RandomStream(11))
        fl = variance_floor(TWO_ATOMS, SAMPLING, 200_000, RandomStream(11))
        np.testing.assert_allclose(tl.value - fl.value, 0.01 * MEAN_C_SQ, atol=3e-3)

    def test_estimates_are_reproducible(self):
        a = total_loss(zero_predictor, TWO_ATOMS, SAMPLING, 2000, RandomStream(9))
        b = total_loss(zero_predictor, TWO_ATOMS, SAMPLING, 2000, RandomStream(9))
        assert a.value == b.value and a.std_error == b.std_error

    def test_json_payload(self):
        est = total_loss(zero_predictor, TWO_ATOMS, SAMPLING, 100, RandomStream(0))
        payload = json.loads(est.to_json())
        assert payload["n"] == 100
        assert payload["sampler"] == "uniform[0.05,4]"


class TestEpsTotalLoss:
    def test_posterior_noise_predictor_is_zero(self):
        """For one atom the realized noise is (X_t - alpha x0)/beta, a function
        of X_t; predicting it recovers the floor of exactly zero."""
        atom = SampleSet([[1.5]])

        def eps_theta(x, t):
            t = np.asarray(t, dtype=float)
            alpha = np.exp(-t)[:, None]
            beta = np.sqrt(-np.expm1(-2.0 * t))[:, None]
            return (np.atleast_2d(x) - alpha * 1.5) / beta

        est = eps_total_loss(eps_theta, atom, SAMPLING, 2000, RandomStream(0))
        assert est.value < 1e-25

    def test_zero_predictor_value(self):
        """eps = 0 loses E[|eps|^2 / beta^2] = d E[1 / beta^2]."""
        ss = SampleSet([[0.0, 0.0]])
        est = eps_total_loss(lambda x, t: np.zeros_like(x), ss, SAMPLING, 100_000,
                             RandomStream(3))
        assert abs(est.value - 2.0 * MEAN_INV_BETA_SQ) < 3.0 * est.std_error

    def test_ansatz_equivalence_is_pathwise(self):
        """Writing xbar = e^t (x - beta eps_theta) makes the weighted total loss
        identical to the noise-prediction loss, draw by draw."""
        delta = random_feature_perturbation(1, seed=5, amplitude=0.7)

        def eps_theta(x, t):
            return delta(x, t)

        def xbar_theta(x, t):
            t = np.asarray(t, dtype=float)
            beta = np.sqrt(-np.expm1(-2.0 * t))[:, None]
            return np.exp(t)[:, None] * (np.atleast_2d(x) - beta * eps_theta(x, t))

        a = total_loss(xbar_theta, TWO_ATOMS, SAMPLING, 20_000, RandomStream(13))
        b = eps_total_loss(eps_theta, TWO_ATOMS, SAMPLING, 20_000, RandomStream(13))
        np.testing.assert_allclose(a.value, b.value, rtol=1e-10)


class TestRiemannEpsLoss:
    def test_zero_predictor_gives_dimension(self):
        grid = np.linspace(0.1, 3.0, 20)
        ss = SampleSet([[0.0, 0.0], [1.0, 1.0]])
        est = riemann_eps_loss(lambda x, t: np.zeros_like(x), ss, grid, 50_000,
                               RandomStream(4))
        assert abs(est.value - 2.0) < 3.0 * est.std_error

    def test_single_node_grid_matches_weighted_loss(self):
        """On a one-node grid the two losses differ by the constant beta^2(t0),
        so the identity holds pathwise under a shared stream."""
        t0 = 0.7
        beta_sq = -np.expm1(-2.0 * t0)
        delta = random_feature_perturbation(1, seed=2, amplitude=0.5)
        a = riemann_eps_loss(delta, TWO_ATOMS, [t0], 5000, RandomStream(8))
        b = eps_total_loss(delta, TWO_ATOMS, TimeSampling.from_grid([t0]), 5000,
                           RandomStream(8))
        np.testing.assert_allclose(a.value, b.value * beta_sq, rtol=1e-12)

    def test_grid_family_changes_emphasis(self):
        """A predictor that is wrong only below t = 0.1 is punished far more on
        a geometric grid (over half its nodes sit there) than on a uniform one."""
        def eps_theta(x, t):
            t = np.asarray(t, dtype=float)
            out = np.zeros_like(np.atleast_2d(x))
            out[t < 0.1] = 3.0
            return out

        geo = make_schedule("geometric", 4.0, 49, t_min=1e-3).t_values
        uni = np.linspace(1e-3, 4.0, 50)
        on_geo = riemann_eps_loss(eps_theta, TWO_ATOMS, geo, 20_000, RandomStream(21))
        on_uni = riemann_eps_loss(eps_theta, TWO_ATOMS, uni, 20_000, RandomStream(21))
        assert on_geo.value > 2.0 * on_uni.value


class TestVarianceFloor:
    def test_single_atom_floor_is_zero(self):
        est = variance_floor(SampleSet([[0.7]]), SAMPLING, 2000, RandomStream(0))
        assert est.value == 0.0

    def test_two_atom_floor_is_positive(self):
        est = variance_floor(TWO_ATOMS, SAMPLING, 20_000, RandomStream(1))
        assert est.value > 10.0 * est.std_error

    def test_no_perturbation_beats_the_floor(self):
        """Feature-space perturbations of the minimizer can only add loss; with
        matched streams the measured excess must not be significantly negative."""
        kern = kernel_xbar_predictor(TWO_ATOMS)
        for seed in range(5):
            delta = random_feature_perturbation(1, seed, amplitude=0.1)
            pred = lambda x, t: kern(x, t) + delta(x, t)
            tp = total_loss(pred, TWO_ATOMS, SAMPLING, 20_000, RandomStream(40 + seed))
            fp = variance_floor(TWO_ATOMS, SAMPLING, 20_000, RandomStream(40 + seed))
            assert tp.value - fp.value > -3.0 * (tp.std_error + fp.std_error)


class TestPredictorFactories:
    def test_zero_predictor_shape(self):
        out = zero_predictor(np.ones((4, 2)), 0.5)
        np.testing.assert_array_equal(out, np.zeros((4, 2)))

    def test_kernel_predictor_matches_field(self):
        pred = kernel_xbar_predictor(TWO_ATOMS)
        field = KernelScore(TWO_ATOMS)
        x = np.array([[0.3], [-1.2]])
        t = np.array([0.5, 1.0])
        np.testing.assert_array_equal(pred(x, t), field.xbar0(x, t))

    def test_constant_shift(self):
        pred = constant_shift_predictor(zero_predictor, [1.0, -2.0])
        out = pred(np.zeros((3, 2)), 0.5)
        np.testing.assert_array_equal(out, np.tile([1.0, -2.0], (3, 1)))

    def test_nearest_atom(self):
        pred = nearest_atom_predictor(TWO_ATOMS)
        out = pred(np.array([[0.2], [-0.4]]), 1.0)
        np.testing.assert_array_equal(out, [[1.0], [-1.0]])

    def test_feature_perturbation_determinism_and_amplitude(self):
        x = np.random.default_rng(0).normal(size=(10, 2))
        d1 = random_feature_perturbation(2, seed=3, amplitude=0.1)
        d2 = random_feature_perturbation(2, seed=3, amplitude=0.2)
        np.testing.assert_array_equal(d1(x, 0.5), random_feature_perturbation(2, 3, amplitude=0.1)(x, 0.5))
        np.testing.assert_allclose(d2(x, 0.5), 2.0 * d1(x, 0.5), rtol=1e-12)
        assert not np.array_equal(d1(x, 0.5), random_feature_perturbation(2, 4, amplitude=0.1)(x, 0.5))
