import tempfile
from pathlib import Path

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal
from django.test import SimpleTestCase

from core.exceptions import ConfigError
from scenarios.config import (
    SQUARE_ANCHORS,
    ScenarioConfig,
    emit_scenario,
    load_scenario,
    reference_scenarios,
    parse_scenario,
    save_scenario,
)
from scenarios.logic import (
    Anchor,
    BiasKind,
    BiasModel,
    Label,
    corrupt_labels,
    draw_initial_state,
    make_motion,
    measure_frame,
    range_truth,
    simulate_trajectory,
    trial_rng,
    write_truth_csv,
)


class MotionModelTest(SimpleTestCase):
    def test_reference_values(self):
        model = make_motion(0.2, 0.04)
        assert_allclose(model.F[0], [1, 0, 0.2, 0])
        assert_allclose(model.G[0], [0.02, 0])
        assert_allclose(model.Q, 0.04 * np.eye(2))

    def test_unit_step(self):
        model = make_motion(1.0, 1.0)
        self.assertEqual(model.F[0, 2], 1.0)
        self.assertEqual(model.G[0, 0], 0.5)

    def test_rejects_degenerate(self):
        with self.assertRaises(ConfigError):
            make_motion(0.0, 0.04)
        with self.assertRaises(ConfigError):
            make_motion(0.2, -1.0)


class TrajectoryTest(SimpleTestCase):
    def test_noiseless_propagation(self):
        model = make_motion(0.2, 1e-300)
        traj = simulate_trajectory(model, [0, 0, 1, 1], 2, seed=1)
        assert_allclose(traj.states[0], [0, 0, 1, 1])
        assert_allclose(traj.states[1], [0.2, 0.2, 1, 1], atol=1e-12)

    def test_same_seed_same_trajectory(self):
        model = make_motion(0.2, 0.04)
        a = simulate_trajectory(model, [10, 10, 0, 0], 50, seed=42)
        b = simulate_trajectory(model, [10, 10, 0, 0], 50, seed=42)
        assert_array_equal(a.states, b.states)

    def test_distinct_trials_differ(self):
        a = trial_rng(7, 0, 0).standard_normal(5)
        b = trial_rng(7, 1, 0).standard_normal(5)
        c = trial_rng(7, 0, 1).standard_normal(5)
        self.assertFalse(np.allclose(a, b))
        self.assertFalse(np.allclose(a, c))

    def test_process_noise_is_zero_mean(self):
        model = make_motion(0.2, 0.04)
        rng = np.random.default_rng(0)
        n = 100_000
        w = rng.standard_normal((n, 2)) * model.sqrt_q
        gw = w @ model.G.T
        std = np.sqrt(np.diag(model.G @ model.Q @ model.G.T))
        self.assertTrue(np.all(np.abs(gw.mean(axis=0)) < 3 * std / np.sqrt(n)))

    def test_initial_state_inside_anchor_box(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            s0 = draw_initial_state(SQUARE_ANCHORS, rng)
            self.assertTrue(0 <= s0[0] <= 1000 and 0 <= s0[1] <= 1000)


class MeasurementTest(SimpleTestCase):
    def setUp(self):
        self.anchors = SQUARE_ANCHORS

    def test_range_truth(self):
        self.assertEqual(range_truth([3, 4], Anchor(1, (0, 0))), 5.0)
        self.assertEqual(range_truth([2, 2], Anchor(1, (2, 2))), 0.0)
        self.assertAlmostEqual(range_truth([1000, 1000], Anchor(1, (0, 0))), 1000 * np.sqrt(2))

    def test_noiseless_ranges(self):
        x = np.array([300.0, 400.0])
        frame = measure_frame(x, self.anchors, {1}, 0.0, BiasModel.exponential(0.0), noise_rng=1)
        expected = [range_truth(x, a) for a in self.anchors]
        assert_allclose(frame.ranges, expected)
        self.assertEqual(frame.true_labels, frame.reported_labels)
        self.assertEqual(frame.true_labels[0], Label.NLOS)

    def test_los_noise_moment(self):
        x = np.array([300.0, 400.0])
        anchor = (Anchor(1, (0.0, 0.0)),)
        rng = np.random.default_rng(5)
        bias = BiasModel.exponential(500.0)
        errors = [measure_frame(x, anchor, (), 10.0, bias, rng).ranges[0] - 500.0 for _ in range(100_000)]
        self.assertAlmostEqual(np.std(errors) / 10.0, 1.0, delta=0.02)

    def test_nlos_bias_moment(self):
        x = np.array([300.0, 400.0])
        anchor = (Anchor(1, (0.0, 0.0)),)
        rng = np.random.default_rng(6)
        bias = BiasModel.exponential(500.0)
        errors = [measure_frame(x, anchor, {1}, 10.0, bias, rng).ranges[0] - 500.0 for _ in range(100_000)]
        self.assertAlmostEqual(np.mean(errors) / 500.0, 1.0, delta=0.02)

    def test_bias_samples_non_negative(self):
        rng = np.random.default_rng(8)
        for bias in (
            BiasModel.exponential(500.0),
            BiasModel(BiasKind.SHIFTED_GAUSSIAN, {"mean": 50.0, "std": 100.0}),
            BiasModel(BiasKind.UNIFORM, {"lower": 0.0, "upper": 300.0}),
        ):
            self.assertTrue(np.all(bias.sample(rng, 10_000) >= 0.0), bias.kind)

    def test_bias_moments(self):
        self.assertEqual(BiasModel.exponential(500.0).variance(), 250_000.0)
        uniform = BiasModel(BiasKind.UNIFORM, {"lower": 100.0, "upper": 400.0})
        self.assertEqual(uniform.mean(), 250.0)
        self.assertEqual(uniform.variance(), 7500.0)
        shifted = BiasModel(BiasKind.SHIFTED_GAUSSIAN, {"mean": 50.0, "std": 100.0})
        draws = shifted.sample(np.random.default_rng(2), 200_000)
        self.assertAlmostEqual(shifted.mean(), draws.mean(), delta=1.0)
        self.assertGreater(shifted.mean(), 50.0)

    def test_rejects_unknown_nlos_ids(self):
        with self.assertRaises(ConfigError):
            measure_frame([0, 0], self.anchors, {9}, 10.0, BiasModel.exponential(500.0), 1)

    def test_streams_aligned_across_nlos_subsets(self):
        x = np.array([500.0, 500.0])
        bias = BiasModel.exponential(500.0)
        a = measure_frame(x, self.anchors, (), 10.0, bias, trial_rng(1, 0, 1), trial_rng(1, 0, 2))
        b = measure_frame(x, self.anchors, {1, 2}, 10.0, bias, trial_rng(1, 0, 1), trial_rng(1, 0, 2))
        assert_array_equal(a.ranges[2:], b.ranges[2:])


class CorruptLabelsTest(SimpleTestCase):
    def setUp(self):
        self.frame = measure_frame(
            np.array([500.0, 500.0]), SQUARE_ANCHORS, {2, 3}, 10.0, BiasModel.exponential(500.0), 4
        )

    def test_empty_sets_identity(self):
        self.assertIs(corrupt_labels(self.frame, set(), set()), self.frame)

    def test_false_alarm(self):
        out = corrupt_labels(self.frame, fa_ids={1})
        self.assertIn(0, out.nlos_indices)
        self.assertNotIn(0, out.los_indices)
        self.assertEqual(out.true_labels, self.frame.true_labels)

    def test_missed_detection(self):
        out = corrupt_labels(self.frame, md_ids={2})
        self.assertIn(1, out.los_indices)

    def test_partition_holds(self):
        out = corrupt_labels(self.frame, fa_ids={1, 4}, md_ids={3})
        self.assertEqual(sorted(out.los_indices + out.nlos_indices), [0, 1, 2, 3])

    def test_rejects_wrong_ids(self):
        with self.assertRaises(ConfigError):
            corrupt_labels(self.frame, fa_ids={2})
        with self.assertRaises(ConfigError):
            corrupt_labels(self.frame, md_ids={1})


class ScenarioConfigTest(SimpleTestCase):
    def test_round_trip(self):
        for config in reference_scenarios():
            self.assertEqual(parse_scenario(emit_scenario(config)), config)

    def test_round_trip_with_optional_keys(self):
        config = ScenarioConfig(
            name="custom",
            bias=BiasModel(BiasKind.UNIFORM, {"lower": 10.0, "upper": 20.0}),
            sekf_process_var=4.0,
            divergence_burn_in=0,
            nlos_ids=(1,),
            filters=("csrukf",),
        )
        self.assertEqual(parse_scenario(emit_scenario(config)), config)

    def test_reference_scenarios(self):
        by_name = {c.name: c for c in reference_scenarios()}
        self.assertEqual(len(by_name), 8)
        self.assertEqual(by_name["large_noise_los2"].sigma_n, 100.0)
        self.assertEqual(by_name["small_noise_los0"].nlos_ids, (1, 2, 3, 4))
        fa = by_name["small_noise_los1_fa"]
        self.assertEqual(fa.fa_ids, (4,))
        self.assertNotIn(4, fa.nlos_ids)

    def test_validation(self):
        with self.assertRaises(ConfigError):
            ScenarioConfig(name="x", alpha=0.5)
        with self.assertRaises(ConfigError):
            ScenarioConfig(name="x", epsilon=-1.0)
        with self.assertRaises(ConfigError):
            ScenarioConfig(name="x", divergence_burn_in=-1)
        with self.assertRaises(ConfigError):
            ScenarioConfig(name="x", nlos_ids=(1,), fa_ids=(1,))
        with self.assertRaises(ConfigError):
            ScenarioConfig(name="x", anchors=(Anchor(1, (0, 0)), Anchor(1, (1, 1))))

    def test_missing_file(self):
        with self.assertRaisesRegex(ConfigError, "nope.toml"):
            load_scenario("/nonexistent/nope.toml")

    def test_malformed_file(self):
        with self.assertRaises(ConfigError):
            parse_scenario("name = [")
        with self.assertRaises(ConfigError):
            parse_scenario('seed = 1')

    def test_save_and_load(self):
        config = reference_scenarios()[0]
        with tempfile.TemporaryDirectory() as tmp:
            path = save_scenario(config, Path(tmp) / "s.toml")
            self.assertEqual(load_scenario(path), config)


class TruthCsvTest(SimpleTestCase):
    def test_dump_has_one_row_per_epoch(self):
        model = make_motion(0.2, 0.04)
        traj = simulate_trajectory(model, [500, 500, 0, 0], 4, seed=1)
        bias = BiasModel.exponential(500.0)
        frames = [
            measure_frame(traj.states[k], SQUARE_ANCHORS, {1}, 10.0, bias, k, epoch=k) for k in range(1, 4)
        ]
        with tempfile.TemporaryDirectory() as tmp:
            path = write_truth_csv(Path(tmp) / "t.csv", traj, frames)
            lines = path.read_text().splitlines()
        self.assertEqual(len(lines), 4)
        self.assertTrue(lines[0].startswith("k,x,y,vx,vy,r_1"))
        self.assertTrue(lines[1].endswith("NLOS,LOS,LOS,LOS"))
