import tempfile
from types import SimpleNamespace
from pathlib import Path

import numpy as np
from django.conf import settings
from django.test import SimpleTestCase, TestCase, tag
from numpy.testing import assert_allclose, assert_array_equal

from core.exceptions import ConfigError
from harness.logic import (
    AllDiverged,
    TrialRecord,
    compute_metrics,
    error_cdf,
    initialize_estimator,
    rmse,
    run_experiment,
    run_trial,
    simulate_trial,
    steady_state_rmse,
)
from harness.models import ExperimentRun
from harness.reports import read_trial_csv, write_outputs, write_trial_csv
from harness.trackers import FILTER_REGISTRY, Tracker, make_tracker
from scenarios.config import ScenarioConfig, reference_scenarios, scenario_to_dict
from srukf.logic import FilterState

ALL_FILTERS = ("csrukf", "srukf", "pkf", "sekf", "bekf", "ekf_or")


def small_config(**overrides):
    values = dict(name="small", steps=20, trials=2, nlos_ids=(1, 2, 3), filters=ALL_FILTERS, seed=9)
    values.update(overrides)
    return ScenarioConfig(**values)


def record_with(errors_xy, name="f", diverged=False, trial=0):
    errors_xy = np.asarray(errors_xy, dtype=float)
    truth = np.zeros((len(errors_xy), 4))
    estimates = np.zeros((len(errors_xy), 4))
    estimates[:, :2] = errors_xy
    return TrialRecord(trial=trial, truth=truth, estimates={name: estimates}, diverged={name: diverged})


class InitializeEstimatorTest(SimpleTestCase):
    def test_factor_is_diagonal_std(self):
        state = initialize_estimator(np.zeros(4), 1)
        assert_array_equal(state.factor, np.diag([100.0, 100.0, 10.0, 10.0]))

    def test_zero_variance_limit(self):
        s0 = np.array([1.0, 2.0, 3.0, 4.0])
        assert_array_equal(initialize_estimator(s0, 1, sigma00=np.zeros(4)).mean, s0)

    def test_sample_covariance(self):
        rng = np.random.default_rng(2)
        draws = np.array([initialize_estimator(np.zeros(4), rng).mean for _ in range(100_000)])
        assert_allclose(np.diag(np.cov(draws.T)), [1e4, 1e4, 1e2, 1e2], rtol=0.03)


class RmseTest(SimpleTestCase):
    def test_perfect_estimator(self):
        assert_array_equal(rmse([record_with(np.zeros((5, 2)))], "f"), np.zeros(5))

    def test_constant_offset(self):
        assert_allclose(rmse([record_with([[3.0, 0.0]] * 4)], "f"), [3.0] * 4)

    def test_two_trials(self):
        records = [record_with([[3.0, 0.0]]), record_with([[0.0, 4.0]], trial=1)]
        assert_allclose(rmse(records, "f"), [np.sqrt(12.5)])

    def test_diverged_trials_excluded(self):
        records = [record_with([[3.0, 0.0]]), record_with([[1e6, 0.0]], diverged=True, trial=1)]
        assert_allclose(rmse(records, "f"), [3.0])

    def test_all_diverged(self):
        with self.assertRaises(AllDiverged):
            rmse([record_with([[1.0, 0.0]], diverged=True)], "f")

    def test_steady_state_window(self):
        self.assertEqual(steady_state_rmse(np.arange(10.0), 0.2), 8.5)
        self.assertEqual(steady_state_rmse([5.0], 0.2), 5.0)


class ErrorCdfTest(SimpleTestCase):
    def test_all_zero_errors(self):
        cdf = error_cdf([record_with(np.zeros((3, 2)))], "f")
        assert_array_equal(cdf([0.0, 1.0, 10.0]), [1.0, 1.0, 1.0])

    def test_two_point_sample(self):
        cdf = error_cdf([record_with([[1.0, 0.0], [2.0, 0.0]])], "f")
        assert_array_equal(cdf.samples, [1.0, 4.0])
        self.assertEqual(cdf(2.0), 0.5)

    def test_distance_domain(self):
        cdf = error_cdf([record_with([[1.0, 0.0], [2.0, 0.0]])], "f", domain="distance")
        self.assertEqual(cdf.domain, "distance")
        self.assertEqual(cdf(1.5), 0.5)

    def test_monotone(self):
        rng = np.random.default_rng(3)
        cdf = error_cdf([record_with(rng.normal(size=(500, 2)))], "f")
        values = cdf(np.linspace(0.0, cdf.samples[-1], 100))
        self.assertTrue(np.all(np.diff(values) >= 0))
        self.assertEqual(values[-1], 1.0)


class TrackerTest(SimpleTestCase):
    def test_registry(self):
        self.assertEqual(set(FILTER_REGISTRY), set(ALL_FILTERS))
        with self.assertRaises(ConfigError):
            make_tracker("kalman", small_config(), small_config().motion, 5.0, None)

    def test_error_threshold_flags_divergence(self):
        config = small_config(nlos_ids=(1, 2, 3, 4), divergence_error=1e-3, divergence_burn_in=0, filters=("ekf_or",))
        record = run_trial(config, 0)
        self.assertTrue(record.diverged["ekf_or"])
        self.assertTrue(np.all(np.isfinite(record.estimates["ekf_or"])))


class StillTracker(Tracker):
    name = "still"

    def _step(self, frame):
        return self.state


class DivergenceBurnInTest(SimpleTestCase):
    def setUp(self):
        self.config = small_config(divergence_error=100.0, divergence_burn_in=3)
        self.tracker = StillTracker(self.config, self.config.motion, 1.0, FilterState(np.zeros(4), np.eye(4)))

    def advance(self, epoch, x):
        return self.tracker.advance(SimpleNamespace(epoch=epoch), np.array([x, 0.0, 0.0, 0.0]))

    def test_early_transient_error_keeps_trial(self):
        for epoch in (1, 2, 3):
            self.advance(epoch, 5000.0)
        for epoch in range(4, 20):
            self.advance(epoch, 1.0)
        self.assertFalse(self.tracker.diverged)
        self.assertFalse(self.tracker.failed)

        errors = np.zeros((19, 2))
        errors[:3, 0] = 5000.0
        record = record_with(errors, name="still", diverged=self.tracker.diverged)
        self.assertTrue(np.isfinite(steady_state_rmse(rmse([record], "still"), 0.2)))

    def test_error_after_burn_in_flags_divergence(self):
        for epoch in (1, 2, 3):
            self.advance(epoch, 1.0)
        with self.assertLogs("harness.trackers", level="WARNING"):
            estimate = self.advance(4, 5000.0)
        self.assertTrue(self.tracker.diverged)
        self.assertFalse(self.tracker.failed)
        assert_array_equal(estimate, np.zeros(4))


class RunExperimentTest(SimpleTestCase):
    def test_minimal_run(self):
        records = run_experiment(small_config(steps=1, trials=1))
        self.assertEqual(len(records), 1)
        self.assertEqual(records[0].epochs, 1)
        self.assertEqual(records[0].filters, ALL_FILTERS)

    def test_deterministic(self):
        a = run_experiment(small_config())
        b = run_experiment(small_config())
        for ra, rb in zip(a, b):
            for name in ALL_FILTERS:
                assert_array_equal(ra.estimates[name], rb.estimates[name])

    def test_trials_differ(self):
        a, b = run_experiment(small_config())
        self.assertFalse(np.allclose(a.truth, b.truth))

    def test_frames_shared_across_filters(self):
        config = small_config()
        _, first = simulate_trial(config, 0, config.motion)
        _, second = simulate_trial(config, 0, config.motion)
        for f1, f2 in zip(first, second):
            assert_array_equal(f1.ranges, f2.ranges)

    def test_label_corruption_applied(self):
        config = small_config(fa_ids=(4,), filters=("csrukf",))
        _, frames = simulate_trial(config, 0, config.motion)
        self.assertEqual(frames[0].los_indices, [])

    def test_workers_match_serial(self):
        config = small_config(trials=3, filters=("csrukf", "bekf"))
        serial = run_experiment(config)
        parallel = run_experiment(config, workers=2)
        self.assertEqual([r.trial for r in parallel], [0, 1, 2])
        for rs, rp in zip(serial, parallel):
            assert_array_equal(rs.estimates["csrukf"], rp.estimates["csrukf"])

    def test_unknown_filter(self):
        with self.assertRaises(ConfigError):
            run_experiment(small_config(), filters=("csrukf", "nope"))

    def test_no_nlos_csrukf_equals_srukf(self):
        records = run_experiment(small_config(nlos_ids=(), filters=("csrukf", "srukf")))
        for r in records:
            assert_array_equal(r.estimates["csrukf"], r.estimates["srukf"])

    def test_metrics_bundle(self):
        records = run_experiment(small_config())
        metrics = compute_metrics(records, steady_fraction=0.2)
        self.assertEqual(set(metrics), set(ALL_FILTERS))
        csrukf = metrics["csrukf"]
        self.assertEqual(len(csrukf.rmse_by_epoch), 20)
        self.assertTrue(np.all(csrukf.rmse_by_epoch >= 0))
        self.assertEqual(csrukf.trials, 2)
        self.assertEqual(csrukf.diagnostics["infeasible_means"], 0)
        self.assertEqual(metrics["srukf"].mean_projected_per_epoch, 0.0)

    def test_metrics_for_all_diverged_filter(self):
        config = small_config(nlos_ids=(1, 2, 3, 4), divergence_error=1e-3, divergence_burn_in=0,
                              filters=("ekf_or", "csrukf"))
        metrics = compute_metrics(run_experiment(config))
        self.assertTrue(np.isnan(metrics["ekf_or"].steady_state_rmse))
        self.assertEqual(metrics["ekf_or"].diverged, 2)


class ReportsTest(SimpleTestCase):
    def test_trial_csv_round_trip(self):
        records = run_experiment(small_config())
        with tempfile.TemporaryDirectory() as tmp:
            back = [read_trial_csv(write_trial_csv(Path(tmp) / f"t{r.trial}.csv", r)) for r in records]
        self.assertEqual(back[0].filters, ALL_FILTERS)
        for name in ALL_FILTERS:
            assert_array_equal(rmse(back, name), rmse(records, name))
        assert_array_equal(back[1].projected["csrukf"], records[1].projected["csrukf"])

    def test_outputs_byte_identical_for_equal_seeds(self):
        config = small_config()
        contents = []
        for _ in range(2):
            records = run_experiment(config)
            metrics = compute_metrics(records)
            with tempfile.TemporaryDirectory() as tmp:
                paths = write_outputs(tmp, config, scenario_to_dict(config), records, metrics, "test")
                contents.append({
                    key: Path(paths[key]).read_bytes() for key in ("metrics", "cdf", "cdf_distance", "manifest")
                })
        self.assertEqual(contents[0], contents[1])

    def test_output_files(self):
        config = small_config(trials=1)
        records = run_experiment(config)
        metrics = compute_metrics(records)
        with tempfile.TemporaryDirectory() as tmp:
            paths = write_outputs(tmp, config, scenario_to_dict(config), records, metrics, "test")
            header = Path(paths["metrics"]).read_text().splitlines()[0]
            plot = Path(paths["plot"]).read_text()
            cdf_header = Path(paths["cdf"]).read_text().splitlines()[0]
            self.assertEqual(len(paths["trials"]), 1)
        self.assertEqual(header, "epoch,time_s," + ",".join(ALL_FILTERS))
        self.assertTrue(cdf_header.startswith("threshold_m2,"))
        self.assertIn("matplotlib", plot)


class ExperimentRunModelTest(TestCase):
    def test_record(self):
        config = small_config(trials=1, steps=5, filters=("csrukf",))
        metrics = compute_metrics(run_experiment(config))
        run = ExperimentRun.record(scenario_to_dict(config), config.filters, metrics, "test", "/tmp/out", 12)
        run.refresh_from_db()
        self.assertEqual(run.scenario_name, "small")
        self.assertEqual(run.filters, ["csrukf"])
        self.assertEqual(run.diverged, {"csrukf": 0})
        self.assertAlmostEqual(run.steady_state_rmse["csrukf"], metrics["csrukf"].steady_state_rmse)


class ReducedOrderingTest(SimpleTestCase):
    """One NLOS-heavy scenario at reduced scale, part of the default run."""

    def test_constrained_filter_matches_bias_model_filter(self):
        config = next(c for c in reference_scenarios(steps=300, trials=20) if c.name == "small_noise_los1")
        filters = ("csrukf", "bekf")
        m = compute_metrics(run_experiment(config, filters), filters, config.steady_fraction)
        self.assertEqual(m["csrukf"].diverged, 0)
        self.assertLessEqual(m["csrukf"].steady_state_rmse, 1.1 * m["bekf"].steady_state_rmse)
        self.assertEqual(m["csrukf"].diagnostics["infeasible_means"], 0)


@tag("acceptance")
class ReferenceOrderingTest(SimpleTestCase):
    """Desk-scale orderings (100 trials x 500 epochs); run with RUN_ACCEPTANCE=1."""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.scenarios = {c.name: c for c in reference_scenarios()}
        cls.workers = getattr(settings, "TRACKING_WORKERS", 1)

    def steady(self, name, filters):
        config = self.scenarios[name]
        metrics = compute_metrics(run_experiment(config, filters, workers=self.workers), filters, config.steady_fraction)
        return metrics

    def test_small_noise_one_los(self):
        m = self.steady("small_noise_los1", ("csrukf", "pkf", "sekf", "bekf"))
        csrukf = m["csrukf"].steady_state_rmse
        self.assertLess(csrukf, 0.9 * m["pkf"].steady_state_rmse)
        self.assertLess(csrukf, 0.9 * m["sekf"].steady_state_rmse)
        self.assertLessEqual(csrukf, 1.1 * m["bekf"].steady_state_rmse)
        self.assertEqual(m["csrukf"].diagnostics["infeasible_means"], 0)

    def test_severe_nlos(self):
        m = self.steady("small_noise_los0", ("csrukf", "pkf", "sekf", "ekf_or"))
        self.assertLess(m["csrukf"].steady_state_rmse, m["sekf"].steady_state_rmse)
        self.assertLess(m["csrukf"].steady_state_rmse, m["pkf"].steady_state_rmse)
        self.assertGreater(m["ekf_or"].diverged, m["ekf_or"].trials // 2)

    def test_benign_large_noise(self):
        m = self.steady("large_noise_los2", ("csrukf", "sekf", "bekf"))
        csrukf, bekf = m["csrukf"].steady_state_rmse, m["bekf"].steady_state_rmse
        self.assertLessEqual(abs(csrukf - bekf) / bekf, 0.15)
        self.assertGreater(m["sekf"].steady_state_rmse, csrukf)

    def test_false_alarm_robustness(self):
        filters = ("csrukf", "sekf", "bekf")
        clean = self.steady("small_noise_los1", filters)
        fa = self.steady("small_noise_los1_fa", filters)
        self.assertLess(fa["csrukf"].steady_state_rmse, fa["sekf"].steady_state_rmse)
        csrukf_loss = fa["csrukf"].steady_state_rmse / clean["csrukf"].steady_state_rmse
        bekf_loss = fa["bekf"].steady_state_rmse / clean["bekf"].steady_state_rmse
        self.assertLessEqual(csrukf_loss, 1.5)
        self.assertGreater(bekf_loss, csrukf_loss)
