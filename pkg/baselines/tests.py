import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose, assert_array_equal

from baselines.logic import (
    BaselineConfig,
    BaselineKind,
    RangeSmootherState,
    ekf_step,
    ekf_update,
    range_jacobian,
    smooth_ranges,
)
from core.exceptions import ConfigError
from projection.logic import build_region, is_feasible
from scenarios.config import SQUARE_ANCHORS, ScenarioConfig
from scenarios.logic import (
    BiasKind,
    BiasModel,
    Label,
    MeasurementFrame,
    make_motion,
    measure_frame,
    simulate_trajectory,
    trial_rng,
)
from srukf.logic import FilterDiagnostics, FilterState, checked_eta, predict, step_unconstrained

ETA = checked_eta(0.7, 4)


def make_frame(ranges, labels, sigma_n=10.0, epoch=1):
    labels = tuple(Label(lab) for lab in labels)
    return MeasurementFrame(
        epoch=epoch,
        anchors=SQUARE_ANCHORS,
        ranges=np.asarray(ranges, dtype=float),
        true_labels=labels,
        reported_labels=labels,
        sigma_n=sigma_n,
    )


def simulate(nlos_ids, K, seed=3, sigma_n=10.0):
    model = make_motion(0.2, 0.04)
    s0 = np.array([300.0, 700.0, 1.0, 0.5])
    traj = simulate_trajectory(model, s0, K + 1, trial_rng(seed, 0, 0))
    noise, bias = trial_rng(seed, 0, 1), trial_rng(seed, 0, 2)
    frames = [
        measure_frame(traj.states[k], SQUARE_ANCHORS, nlos_ids, sigma_n, BiasModel.exponential(500.0), noise, bias, epoch=k)
        for k in range(1, K + 1)
    ]
    start = FilterState(s0 + np.array([20.0, -20.0, 1.0, 1.0]), np.diag([100.0, 100.0, 10.0, 10.0]))
    return model, traj, frames, start


class BaselineConfigTest(SimpleTestCase):
    def test_from_scenario_bias_moments(self):
        config = BaselineConfig.from_scenario(ScenarioConfig(name="x"), "bekf")
        self.assertIs(config.kind, BaselineKind.BEKF)
        self.assertEqual(config.bias_mean, 500.0)
        self.assertEqual(config.bias_var, 250_000.0)

    def test_uniform_bias_moments(self):
        scenario = ScenarioConfig(name="x", bias=BiasModel(BiasKind.UNIFORM, {"lower": 0.0, "upper": 600.0}))
        config = BaselineConfig.from_scenario(scenario, BaselineKind.BEKF)
        self.assertEqual(config.bias_mean, 300.0)
        self.assertEqual(config.bias_var, 30_000.0)

    def test_default_process_var(self):
        self.assertEqual(BaselineConfig("sekf").process_var(10.0), 25.0)
        self.assertEqual(BaselineConfig("sekf", sekf_process_var=4.0).process_var(10.0), 4.0)

    def test_validation(self):
        with self.assertRaises(ConfigError):
            BaselineConfig("sekf", sekf_scale=0.5)
        with self.assertRaises(ValueError):
            BaselineConfig("kalman")


class RangeSmootherTest(SimpleTestCase):
    def test_initialises_at_first_measurement(self):
        out = smooth_ranges(RangeSmootherState.empty(2), [100.0, 200.0], 10.0, 25.0)
        assert_array_equal(out.estimates, [100.0, 200.0])
        assert_array_equal(out.variances, [100.0, 100.0])

    def test_constant_ranges_stay_put(self):
        smoother = RangeSmootherState.empty(1)
        for _ in range(20):
            smoother = smooth_ranges(smoother, [500.0], 10.0, 25.0)
        assert_allclose(smoother.estimates, [500.0])
        self.assertLess(smoother.variances[0], 100.0)

    def test_reduces_noise(self):
        rng = np.random.default_rng(4)
        raw = 500.0 + 10.0 * rng.standard_normal(5000)
        smoother = RangeSmootherState.empty(1)
        smoothed = []
        for r in raw:
            smoother = smooth_ranges(smoother, [r], 10.0, 25.0)
            smoothed.append(smoother.estimates[0])
        self.assertLess(np.std(smoothed[100:]), np.std(raw[100:]))


class RangeJacobianTest(SimpleTestCase):
    def test_unit_rows(self):
        h, H = range_jacobian([300.0, 400.0, 5.0, 5.0], SQUARE_ANCHORS)
        self.assertAlmostEqual(h[0], 500.0)
        assert_allclose(np.linalg.norm(H[:, :2], axis=1), 1.0)
        assert_array_equal(H[:, 2:], 0.0)

    def test_estimate_on_anchor(self):
        h, H = range_jacobian([0.0, 0.0, 0.0, 0.0], SQUARE_ANCHORS)
        self.assertEqual(h[0], 0.0)
        self.assertTrue(np.all(np.isfinite(H)))


class EkfStepTest(SimpleTestCase):
    def test_bekf_without_nlos_matches_ekf_or(self):
        model, _, frames, start = simulate((), 30)
        bekf = BaselineConfig(BaselineKind.BEKF, bias_mean=1e-12, bias_var=1e-24)
        ekf_or = BaselineConfig(BaselineKind.EKF_OR)
        a = b = start
        for frame in frames:
            a = ekf_step(a, model, frame, bekf)
            b = ekf_step(b, model, frame, ekf_or)
            assert_array_equal(a.mean, b.mean)
            assert_array_equal(a.factor, b.factor)

    def test_ekf_or_without_los_only_predicts(self):
        model, _, frames, start = simulate((1, 2, 3, 4), 20)
        config = BaselineConfig(BaselineKind.EKF_OR)
        state, trace = start, np.trace(start.covariance)
        for frame in frames:
            state = ekf_step(state, model, frame, config)
            self.assertGreaterEqual(np.trace(state.covariance), trace)
            trace = np.trace(state.covariance)

    def test_pkf_feasible_mean_unchanged(self):
        model = make_motion(0.2, 0.04)
        start = FilterState(np.array([500.0, 500.0, 0.0, 0.0]), np.diag([10.0, 10.0, 1.0, 1.0]))
        frame = make_frame([2000.0, 707.0, 707.0, 707.0], ["NLOS", "LOS", "LOS", "LOS"])
        config = BaselineConfig(BaselineKind.PKF)
        out = ekf_step(start, model, frame, config, eta_alpha=ETA, epsilon=3.0)
        expected = step_unconstrained(start, model, frame, ETA)
        assert_array_equal(out.mean, expected.mean)
        assert_array_equal(out.factor, expected.factor)

    def test_pkf_projects_mean_only(self):
        model = make_motion(0.2, 0.04)
        start = FilterState(np.array([500.0, 500.0, 0.0, 0.0]), np.diag([10.0, 10.0, 1.0, 1.0]))
        frame = make_frame([600.0, 707.0, 707.0, 707.0], ["NLOS", "LOS", "LOS", "LOS"])
        diagnostics = FilterDiagnostics()
        out = ekf_step(
            start, model, frame, BaselineConfig(BaselineKind.PKF),
            eta_alpha=ETA, epsilon=0.0, diagnostics=diagnostics,
        )
        unconstrained = step_unconstrained(start, model, frame, ETA)
        self.assertTrue(is_feasible(out.mean, build_region(frame, 0.0), tol=1e-6))
        assert_array_equal(out.factor, unconstrained.factor)
        self.assertEqual(diagnostics.projected_points, 1)

    def test_pkf_needs_filter_parameters(self):
        model, _, frames, start = simulate((1,), 1)
        with self.assertRaises(ConfigError):
            ekf_step(start, model, frames[0], BaselineConfig(BaselineKind.PKF))

    def test_sekf_needs_smoothed_ranges(self):
        model, _, frames, start = simulate((1,), 1)
        with self.assertRaises(ConfigError):
            ekf_step(start, model, frames[0], BaselineConfig(BaselineKind.SEKF))

    def test_sekf_tracks(self):
        model, traj, frames, start = simulate((1,), 200)
        config = BaselineConfig(BaselineKind.SEKF)
        smoother = RangeSmootherState.empty(4)
        state = start
        for frame in frames:
            smoother = smooth_ranges(smoother, frame.ranges, frame.sigma_n, config.process_var(frame.sigma_n))
            state = ekf_step(state, model, frame, config, smoothed=smoother)
        self.assertTrue(state.is_finite())

    def test_bekf_innovations_are_white(self):
        model, traj, frames, start = simulate((), 2000)
        state = start
        whitened = []
        for k, frame in enumerate(frames):
            prior = predict(state, model)
            state, w = ekf_update(prior, frame.ranges, frame.anchors, np.full(4, frame.sigma_n ** 2))
            if k >= 100:
                whitened.extend(w)
        self.assertAlmostEqual(np.var(whitened), 1.0, delta=0.15)

    def test_step_records_innovations(self):
        model, traj, frames, start = simulate((), 2000)
        config = BaselineConfig(BaselineKind.BEKF)
        diagnostics = FilterDiagnostics()
        state = start
        for k, frame in enumerate(frames):
            state = ekf_step(state, model, frame, config, diagnostics=diagnostics if k >= 100 else None)
        self.assertEqual(diagnostics.innovation_count, 4 * (len(frames) - 100))
        self.assertAlmostEqual(diagnostics.innovation_nis, 1.0, delta=0.15)
        self.assertEqual(diagnostics.as_dict()["innovation_nis"], diagnostics.innovation_nis)

    def test_los_only_update_records_los_ranges(self):
        model, traj, frames, start = simulate((1, 2), 5)
        diagnostics = FilterDiagnostics()
        state = start
        for frame in frames:
            state = ekf_step(state, model, frame, BaselineConfig(BaselineKind.EKF_OR), diagnostics=diagnostics)
        self.assertEqual(diagnostics.innovation_count, 2 * len(frames))
        self.assertIsNone(FilterDiagnostics().innovation_nis)
