import numpy as np
from numpy.testing import assert_allclose, assert_array_equal
from django.test import SimpleTestCase

from core.exceptions import ConfigError
from kernels.logic import cov_to_factor
from scenarios.config import SQUARE_ANCHORS
from scenarios.logic import (
    Anchor,
    BiasModel,
    MotionModel,
    make_motion,
    measure_frame,
    simulate_trajectory,
)
from srukf.logic import (
    FilterDiagnostics,
    FilterNumericalFailure,
    FilterState,
    NegativeSigmaWeight,
    checked_eta,
    eta_from_alpha,
    gen_sigma,
    measurement_stats,
    predict,
    step_unconstrained,
    update,
    update_dense,
)


def random_state(rng, scale=30.0):
    A = rng.standard_normal((4, 4))
    cov = scale * (A @ A.T + 0.5 * np.eye(4))
    mean = np.concatenate([rng.uniform(100, 900, 2), rng.standard_normal(2)])
    return FilterState(mean, cov_to_factor(cov))


def dense_ukf_step(mean, cov, model, frame, eta):
    """Covariance-form UKF with the same sigma rule, standard Kalman gain."""
    mean = model.F @ mean
    cov = model.F @ cov @ model.F.T + model.G @ model.Q @ model.G.T
    los = frame.los_indices
    if not los:
        return mean, cov
    N = 4
    U = np.linalg.cholesky(cov).T
    pts = np.vstack([mean, mean + np.sqrt(eta) * U, mean - np.sqrt(eta) * U])
    w = np.full(2 * N + 1, 1.0 / (2 * eta))
    w[0] = 1.0 - N / eta
    xy = np.array([frame.anchors[i].position for i in los])
    Z = np.linalg.norm(pts[:, None, :2] - xy[None], axis=2)
    zhat = w @ Z
    Pz = sum(w[j] * np.outer(Z[j] - zhat, Z[j] - zhat) for j in range(2 * N + 1))
    Pz = Pz + frame.sigma_n ** 2 * np.eye(len(los))
    Psz = sum(w[j] * np.outer(pts[j] - mean, Z[j] - zhat) for j in range(2 * N + 1))
    K = Psz @ np.linalg.inv(Pz)
    mean = mean + K @ (frame.ranges[los] - zhat)
    cov = cov - K @ Pz @ K.T
    return mean, 0.5 * (cov + cov.T)


class EtaTest(SimpleTestCase):
    def test_reference_value(self):
        self.assertAlmostEqual(eta_from_alpha(0.70, 4), 4.8784, delta=1e-3)

    def test_closed_form_two_dof(self):
        self.assertAlmostEqual(eta_from_alpha(0.5, 2), 2 * np.log(2), delta=1e-6)

    def test_small_alpha_limit(self):
        eta = eta_from_alpha(1e-6, 4)
        self.assertGreater(eta, 0.0)
        self.assertLess(eta, 1e-2)

    def test_rejects_out_of_range(self):
        for alpha in (0.0, 1.0, -0.1, 1.5):
            with self.assertRaises(ConfigError):
                eta_from_alpha(alpha, 4)

    def test_weight_law_enforced(self):
        self.assertGreaterEqual(checked_eta(0.61, 4), 4.0)
        with self.assertRaises(ConfigError):
            checked_eta(0.5, 4)


class PredictTest(SimpleTestCase):
    def test_vanishing_prior(self):
        model = make_motion(0.2, 1.0)
        state = FilterState(np.zeros(4), 1e-12 * np.eye(4))
        prior = predict(state, model)
        assert_allclose(prior.covariance, model.G @ model.G.T, atol=1e-12)

    def test_identity_propagation(self):
        model = MotionModel(dt=0.0, sigma_w2=1e-300, F=np.eye(4), G=np.zeros((4, 2)), Q=1e-300 * np.eye(2))
        U = np.triu(np.arange(1.0, 17.0).reshape(4, 4))
        prior = predict(FilterState(np.ones(4), U), model)
        assert_allclose(prior.factor, U, atol=1e-12)
        assert_allclose(prior.mean, np.ones(4))

    def test_matches_dense_covariance(self):
        rng = np.random.default_rng(2)
        model = make_motion(0.2, 0.04)
        for _ in range(20):
            state = random_state(rng)
            prior = predict(state, model)
            dense = model.F @ state.covariance @ model.F.T + model.G @ model.Q @ model.G.T
            err = np.linalg.norm(prior.covariance - dense) / np.linalg.norm(dense)
            self.assertLess(err, 1e-10)


class SigmaTest(SimpleTestCase):
    def test_unit_spread(self):
        sig = gen_sigma(np.zeros(4), np.eye(4), 4.0)
        assert_allclose(sig.points[1:5], 2 * np.eye(4))
        assert_allclose(sig.points[5:], -2 * np.eye(4))
        self.assertEqual(sig.weights[0], 0.0)
        assert_allclose(sig.weights[1:], 1 / 8)

    def test_reference_weights(self):
        sig = gen_sigma(np.zeros(4), np.eye(4), 4.8784)
        self.assertAlmostEqual(sig.weights[0], 0.18005, places=4)
        self.assertAlmostEqual(sig.weights[1], 0.10249, places=4)
        self.assertAlmostEqual(sig.weights.sum(), 1.0, places=12)

    def test_moment_exactness(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            state = random_state(rng, scale=1.0)
            sig = gen_sigma(state.mean, state.factor, eta_from_alpha(0.7, 4))
            mean = sig.weights @ sig.points
            d = sig.points - mean
            cov = (sig.weights[:, None] * d).T @ d
            assert_allclose(mean, state.mean, rtol=0, atol=1e-12 * np.abs(state.mean).max())
            assert_allclose(cov, state.covariance, rtol=0, atol=1e-12 * np.abs(state.covariance).max())

    def test_symmetry(self):
        sig = gen_sigma(np.arange(4.0), np.diag([1.0, 2.0, 3.0, 4.0]), 5.0)
        assert_allclose(sig.points[1:5] + sig.points[5:], 2 * sig.points[0:1].repeat(4, axis=0))


class MeasurementStatsTest(SimpleTestCase):
    def test_collapsed_sigma_points(self):
        sig = gen_sigma(np.array([3.0, 4.0, 0.0, 0.0]), 1e-14 * np.eye(4), 4.8784)
        stats = measurement_stats(sig, [Anchor(1, (0.0, 0.0)), Anchor(2, (10.0, 0.0))], 10.0)
        assert_allclose(stats.Uz.T @ stats.Uz, 100.0 * np.eye(2), atol=1e-9)
        self.assertAlmostEqual(stats.z_pred[0], 5.0)

    def test_matches_dense_innovation_covariance(self):
        rng = np.random.default_rng(9)
        eta = eta_from_alpha(0.7, 4)
        for _ in range(20):
            state = random_state(rng)
            sig = gen_sigma(state.mean, state.factor, eta)
            anchors = list(SQUARE_ANCHORS[:3])
            stats = measurement_stats(sig, anchors, 10.0)
            xy = np.array([a.position for a in anchors])
            Z = np.linalg.norm(sig.points[:, None, :2] - xy[None], axis=2)
            d = Z - sig.weights @ Z
            dense = (sig.weights[:, None] * d).T @ d + 100.0 * np.eye(3)
            err = np.linalg.norm(stats.Uz.T @ stats.Uz - dense) / np.linalg.norm(dense)
            self.assertLess(err, 1e-10)
            self.assertGreaterEqual(np.linalg.eigvalsh(stats.Uz.T @ stats.Uz).min(), 100.0 - 1e-9)

    def test_rejects_negative_weights(self):
        sig = gen_sigma(np.zeros(4), np.eye(4), 2.0)
        with self.assertRaises(NegativeSigmaWeight):
            measurement_stats(sig, [Anchor(1, (0.0, 0.0))], 10.0)


class UpdateTest(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(12)
        self.eta = eta_from_alpha(0.7, 4)
        self.anchors = list(SQUARE_ANCHORS)

    def _stats(self, state):
        sig = gen_sigma(state.mean, state.factor, self.eta)
        return measurement_stats(sig, self.anchors, 10.0)

    def test_zero_innovation_keeps_mean(self):
        prior = random_state(self.rng)
        stats = self._stats(prior)
        post = update(prior, stats, stats.z_pred)
        assert_allclose(post.mean, prior.mean)
        self.assertLess(np.trace(post.covariance), np.trace(prior.covariance))

    def test_uncorrelated_measurement(self):
        prior = random_state(self.rng)
        stats = self._stats(prior)
        stats = type(stats)(z_pred=stats.z_pred, Uz=stats.Uz, cross=np.zeros_like(stats.cross))
        post = update(prior, stats, stats.z_pred + 5.0)
        assert_allclose(post.mean, prior.mean)
        assert_allclose(post.factor, prior.factor)

    def test_matches_standard_gain(self):
        for _ in range(50):
            prior = random_state(self.rng)
            stats = self._stats(prior)
            z = stats.z_pred + 10.0 * self.rng.standard_normal(len(self.anchors))
            fast = update(prior, stats, z)
            dense = update_dense(prior, stats, z)
            assert_allclose(fast.mean, dense.mean, rtol=1e-9, atol=1e-9)
            err = np.linalg.norm(fast.covariance - dense.covariance) / np.linalg.norm(dense.covariance)
            self.assertLess(err, 1e-9)

    def test_rejects_shape_mismatch(self):
        prior = random_state(self.rng)
        with self.assertRaises(ValueError):
            update(prior, self._stats(prior), np.zeros(2))


class StepTest(SimpleTestCase):
    def setUp(self):
        self.model = make_motion(0.2, 0.04)
        self.eta = eta_from_alpha(0.7, 4)
        self.bias = BiasModel.exponential(500.0)

    def _frames(self, K, nlos_ids, sigma_n=10.0, seed=0):
        traj = simulate_trajectory(self.model, [400, 600, 1, -1], K + 1, seed=seed)
        rng = np.random.default_rng(seed + 1)
        frames = [
            measure_frame(traj.states[k], SQUARE_ANCHORS, nlos_ids, sigma_n, self.bias, rng, epoch=k)
            for k in range(1, K + 1)
        ]
        return traj, frames

    def test_all_nlos_returns_prediction(self):
        _, frames = self._frames(1, {1, 2, 3, 4})
        state = FilterState(np.array([400, 600, 1, -1.0]), np.diag([100, 100, 10, 10.0]))
        out = step_unconstrained(state, self.model, frames[0], self.eta)
        prior = predict(state, self.model)
        assert_array_equal(out.mean, prior.mean)
        assert_array_equal(out.factor, prior.factor)

    def test_position_error_shrinks_with_los(self):
        traj, frames = self._frames(100, set(), sigma_n=1.0)
        state = FilterState(traj.states[0] + np.array([80.0, -60.0, 0, 0]), np.diag([100, 100, 10, 10.0]))
        first_error = np.linalg.norm(state.mean[:2] - traj.states[0, :2])
        for frame in frames:
            state = step_unconstrained(state, self.model, frame, self.eta)
        last_error = np.linalg.norm(state.mean[:2] - traj.states[-1, :2])
        self.assertLess(last_error, 0.1 * first_error)

    def test_deterministic(self):
        _, frames = self._frames(5, {1})
        start = FilterState(np.array([400, 600, 1, -1.0]), np.diag([100, 100, 10, 10.0]))
        runs = []
        for _ in range(2):
            state = start
            for frame in frames:
                state = step_unconstrained(state, self.model, frame, self.eta)
            runs.append(state)
        assert_array_equal(runs[0].mean, runs[1].mean)
        assert_array_equal(runs[0].factor, runs[1].factor)

    def test_square_root_matches_dense_ukf_over_long_run(self):
        traj, frames = self._frames(100, set(), sigma_n=10.0, seed=3)
        cov0 = np.diag([1e4, 1e4, 1e2, 1e2])
        mean0 = traj.states[0] + np.array([50.0, -30.0, 2.0, -1.0])
        state = FilterState(mean0, np.sqrt(cov0))
        mean, cov = mean0.copy(), cov0.copy()
        for frame in frames:
            state = step_unconstrained(state, self.model, frame, self.eta)
            mean, cov = dense_ukf_step(mean, cov, self.model, frame, self.eta)
            assert_allclose(state.mean, mean, rtol=0, atol=1e-9)
            err = np.linalg.norm(state.covariance - cov) / np.linalg.norm(cov)
            self.assertLess(err, 1e-9)

    def test_fallback_on_downdate_failure(self):
        from unittest.mock import patch

        _, frames = self._frames(1, set())
        state = FilterState(np.array([400, 600, 1, -1.0]), np.diag([100, 100, 10, 10.0]))
        diagnostics = FilterDiagnostics()
        with patch("srukf.logic.update", side_effect=FilterNumericalFailure("forced")):
            out = step_unconstrained(state, self.model, frames[0], self.eta, diagnostics)
        self.assertEqual(diagnostics.downdate_fallbacks, 1)
        self.assertTrue(out.is_finite())
        self.assertTrue(np.all(np.diag(out.factor) > 0))
