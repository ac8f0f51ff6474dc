import tempfile
from io import StringIO
from pathlib import Path
from unittest.mock import patch

import numpy as np
from django.core.management import call_command
from django.core.management.base import CommandError
from django.db import DatabaseError
from django.test import SimpleTestCase, TestCase, override_settings

from cli.logic import parse_disc, parse_factor, parse_name_list, resolve_run_config
from core.exceptions import ConfigError, TrackingError
from harness.models import ExperimentRun
from scenarios.config import ScenarioConfig, load_scenario, reference_scenarios, save_scenario


def write_small_scenario(directory, **overrides):
    values = dict(name="cli_small", steps=5, trials=2, nlos_ids=(1, 2, 3), seed=11)
    values.update(overrides)
    return save_scenario(ScenarioConfig(**values), Path(directory) / "small.toml")


class ParseTest(SimpleTestCase):
    def test_name_list(self):
        self.assertEqual(parse_name_list("csrukf, pkf,,bekf"), ("csrukf", "pkf", "bekf"))
        with self.assertRaises(ConfigError):
            parse_name_list(" , ")

    def test_factor(self):
        np.testing.assert_array_equal(parse_factor(None, 4), np.eye(4))
        np.testing.assert_array_equal(parse_factor("1,2,3,4", 4), np.diag([1.0, 2.0, 3.0, 4.0]))
        np.testing.assert_array_equal(parse_factor("1,2;0,3", 2), [[1.0, 2.0], [0.0, 3.0]])
        with self.assertRaises(ConfigError):
            parse_factor("1,0;2,3", 2)
        with self.assertRaises(ConfigError):
            parse_factor("1,2,3", 4)

    def test_disc(self):
        self.assertEqual(parse_disc("0,1000,250.5"), ((0.0, 1000.0), 250.5))
        with self.assertRaises(ConfigError):
            parse_disc("0,0,-1")
        with self.assertRaises(ConfigError):
            parse_disc("a,b,c")


@override_settings(NLOS_TRACK_OUT=None, TRACKING_WORKERS=1)
class ResolveRunConfigTest(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.path = write_small_scenario(self.tmp.name)

    def test_overrides_applied(self):
        run_config = resolve_run_config(str(self.path), "csrukf,bekf", trials=3, seed=5, alpha=0.8)
        config = run_config.load()
        self.assertEqual(config.filters, ("csrukf", "bekf"))
        self.assertEqual((config.trials, config.steps, config.seed, config.alpha), (3, 5, 5, 0.8))
        self.assertEqual(run_config.workers, 1)

    def test_missing_file(self):
        with self.assertRaisesMessage(ConfigError, "nowhere.toml"):
            resolve_run_config("nowhere.toml")

    def test_ranges(self):
        for kwargs in ({"alpha": 0.6}, {"alpha": 1.0}, {"epsilon": -1.0}, {"trials": 0}, {"threads": 0}):
            with self.subTest(**kwargs), self.assertRaises(ConfigError):
                resolve_run_config(str(self.path), **kwargs)

    def test_unknown_filter(self):
        with self.assertRaises(ConfigError):
            resolve_run_config(str(self.path), "csrukf,ukf")

    def test_env_out_overrides(self):
        with override_settings(NLOS_TRACK_OUT="/tmp/env_out"):
            run_config = resolve_run_config(str(self.path), out="elsewhere")
        self.assertEqual(run_config.out, Path("/tmp/env_out"))

    def test_workers_default_from_settings(self):
        with override_settings(TRACKING_WORKERS=3):
            self.assertEqual(resolve_run_config(str(self.path)).workers, 3)
        self.assertEqual(resolve_run_config(str(self.path), threads=2).workers, 2)


@override_settings(NLOS_TRACK_OUT=None, TRACKING_WORKERS=1)
class RunCommandTest(TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.root = Path(self.tmp.name)
        self.path = write_small_scenario(self.root)

    def run_command(self, *args):
        out = StringIO()
        call_command("run", "--scenario", str(self.path), *args, stdout=out)
        return out.getvalue()

    def test_happy_path(self):
        out_dir = self.root / "out"
        output = self.run_command("--filters", "csrukf,pkf,sekf,bekf", "--out", str(out_dir))
        for name in ("metrics.csv", "cdf.csv", "cdf_distance.csv", "manifest.json", "plot_metrics.py"):
            self.assertTrue((out_dir / name).is_file(), name)
        self.assertTrue((out_dir / "trials" / "trial_1.csv").is_file())
        self.assertIn("steady RMSE", output)
        self.assertIn("bekf", output)
        run = ExperimentRun.objects.get()
        self.assertEqual(run.filters, ["csrukf", "pkf", "sekf", "bekf"])
        self.assertEqual(run.output_dir, str(out_dir))
        self.assertIsNotNone(run.process_duration_ms)

    def test_same_seed_gives_identical_metrics(self):
        self.run_command("--seed", "7", "--out", str(self.root / "a"))
        self.run_command("--seed", "7", "--out", str(self.root / "b"))
        for name in ("metrics.csv", "cdf.csv", "manifest.json"):
            self.assertEqual((self.root / "a" / name).read_bytes(), (self.root / "b" / name).read_bytes())

    def test_dump_truth(self):
        self.run_command("--filters", "csrukf", "--dump-truth", "--out", str(self.root / "out"))
        self.assertTrue((self.root / "out" / "truth" / "truth_trial_0.csv").is_file())

    def test_env_out(self):
        env_out = self.root / "env"
        with override_settings(NLOS_TRACK_OUT=str(env_out)):
            self.run_command("--filters", "csrukf", "--out", str(self.root / "ignored"))
        self.assertTrue((env_out / "metrics.csv").is_file())
        self.assertFalse((self.root / "ignored").exists())

    def test_missing_scenario_exits_2(self):
        with self.assertRaises(CommandError) as cm:
            call_command("run", "--scenario", str(self.root / "missing.toml"), stdout=StringIO())
        self.assertEqual(cm.exception.returncode, 2)
        self.assertIn("missing.toml", str(cm.exception))

    def test_bad_alpha_exits_2(self):
        with self.assertRaises(CommandError) as cm:
            self.run_command("--alpha", "0.5", "--out", str(self.root / "out"))
        self.assertEqual(cm.exception.returncode, 2)

    def test_runtime_failure_exits_3(self):
        with patch("cli.management.commands.run.run_experiment", side_effect=TrackingError("boom")):
            with self.assertRaises(CommandError) as cm:
                self.run_command("--out", str(self.root / "out"))
        self.assertEqual(cm.exception.returncode, 3)
        self.assertFalse(ExperimentRun.objects.exists())

    def test_registry_failure_is_not_fatal(self):
        with patch.object(ExperimentRun, "record", side_effect=DatabaseError("locked")):
            with self.assertLogs("cli.management.commands.run", level="WARNING"):
                output = self.run_command("--filters", "csrukf", "--out", str(self.root / "out"))
        self.assertIn("Wrote results", output)


class ProjectCommandTest(SimpleTestCase):
    def project(self, *args):
        out = StringIO()
        call_command("project", *args, stdout=out)
        return out.getvalue()

    def test_closed_form_disc(self):
        output = self.project("--state", "3,0,0,0", "--disc", "0,0,1")
        self.assertIn("projected: 1.000000", output)
        self.assertIn("active: true", output)

    def test_feasible_point(self):
        output = self.project("--state", "0.5,0,0,0", "--disc", "0,0,1")
        self.assertIn("projected: 0.500000, 0.000000, 0.000000, 0.000000", output)
        self.assertIn("active: false", output)
        self.assertIn("iterations: 0", output)

    def test_contradictory_discs(self):
        with self.assertRaises(CommandError) as cm:
            self.project("--state", "5,5,0,0", "--disc", "0,0,1", "--disc", "10,0,1")
        self.assertEqual(cm.exception.returncode, 3)
        self.assertIn("infeasible region", str(cm.exception))

    def test_parse_errors_exit_3(self):
        for args in (("--state", "1,x"), ("--state", "1,1,0,0", "--disc", "0,0"), ("--state", "1,1,0,0")):
            with self.subTest(args=args), self.assertRaises(CommandError) as cm:
                self.project(*args)
            self.assertEqual(cm.exception.returncode, 3)


class EmitScenariosCommandTest(SimpleTestCase):
    def emit(self, out_dir):
        call_command("emit_scenarios", "--out", str(out_dir), stdout=StringIO())
        return {p.name: p.read_bytes() for p in sorted(Path(out_dir).glob("*.toml"))}

    def test_emits_reference_scenarios(self):
        with tempfile.TemporaryDirectory() as tmp:
            files = self.emit(tmp)
            large = load_scenario(Path(tmp) / "large_noise_los1.toml")
            fa = load_scenario(Path(tmp) / "small_noise_los1_fa.toml")
            md = load_scenario(Path(tmp) / "small_noise_los1_md.toml")
        self.assertEqual(len(files), 8)
        self.assertEqual(large.sigma_n, 100.0)
        self.assertEqual(fa.fa_ids, (4,))
        self.assertEqual(md.md_ids, (1,))
        self.assertEqual(large, next(c for c in reference_scenarios() if c.name == large.name))

    def test_re_emission_is_byte_identical(self):
        with tempfile.TemporaryDirectory() as a, tempfile.TemporaryDirectory() as b:
            self.assertEqual(self.emit(a), self.emit(b))


@override_settings(NLOS_TRACK_OUT=None, TRACKING_WORKERS=1)
class SweepAlphaCommandTest(SimpleTestCase):
    def test_reports_each_alpha(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = write_small_scenario(tmp)
            out = StringIO()
            call_command("sweep_alpha", "--scenario", str(path), "--alphas", "0.65,0.85", "--trials", "1", stdout=out)
        lines = out.getvalue().splitlines()
        self.assertTrue(any(line.strip().startswith("0.650") for line in lines))
        self.assertTrue(any(line.strip().startswith("0.850") for line in lines))

    def test_alpha_out_of_range(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = write_small_scenario(tmp)
            with self.assertRaises(CommandError) as cm:
                call_command("sweep_alpha", "--scenario", str(path), "--alphas", "0.5", stdout=StringIO())
        self.assertEqual(cm.exception.returncode, 2)
