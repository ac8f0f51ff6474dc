import logging
import time

import numpy as np
from django.conf import settings
from django.core.management.base import BaseCommand, CommandError
from django.db import DatabaseError

from cli.logic import resolve_run_config
from core.exceptions import ConfigError, TrackingError
from harness.logic import compute_metrics, run_experiment
from harness.models import ExperimentRun
from harness.reports import write_outputs
from scenarios.config import scenario_to_dict

logger = logging.getLogger(__name__)


class Command(BaseCommand):
    help = 'Run a Monte-Carlo tracking experiment and write metrics CSVs'

    def add_arguments(self, parser):
        parser.add_argument('--scenario', required=True, help='Scenario TOML file')
        parser.add_argument('--filters', help='Comma-separated filter names (default: from the scenario)')
        parser.add_argument('--trials', type=int, help='Number of Monte-Carlo trials (T)')
        parser.add_argument('--steps', type=int, help='Epochs per trial (K)')
        parser.add_argument('--seed', type=int)
        parser.add_argument('--alpha', type=float, help='Sigma-point confidence level, 0.6 < alpha < 1')
        parser.add_argument('--epsilon', type=float, help='Constraint slack in units of sigma_n')
        parser.add_argument('--out', help='Output directory (NLOS_TRACK_OUT takes precedence)')
        parser.add_argument('--threads', type=int, help='Worker processes for trials')
        parser.add_argument('--dump-truth', action='store_true', help='Also write truth_trial_<t>.csv files')

    def handle(self, *args, **options):
        started = time.monotonic()
        try:
            run_config = resolve_run_config(
                options['scenario'], options.get('filters'), options.get('trials'), options.get('steps'),
                options.get('seed'), options.get('alpha'), options.get('epsilon'), options.get('out'),
                options.get('threads'), options.get('dump_truth', False),
            )
            config = run_config.load()
        except ConfigError as e:
            raise CommandError(f"config error: {e}", returncode=2) from e

        self.stdout.write(
            f"Running '{config.name}': {config.trials} trials x {config.steps} epochs, "
            f"filters {', '.join(config.filters)}, seed {config.seed}"
        )
        dump_dir = None
        if run_config.dump_truth:
            dump_dir = run_config.out / "truth"
            dump_dir.mkdir(parents=True, exist_ok=True)

        code_version = getattr(settings, 'TRACKING_CODE_VERSION', 'unknown')
        config_echo = scenario_to_dict(config)
        try:
            records = run_experiment(config, config.filters, workers=run_config.workers, dump_dir=dump_dir)
            metrics = compute_metrics(records, config.filters, config.steady_fraction)
            write_outputs(run_config.out, config, config_echo, records, metrics, code_version)
        except ConfigError as e:
            raise CommandError(f"config error: {e}", returncode=2) from e
        except (TrackingError, OSError, np.linalg.LinAlgError) as e:
            raise CommandError(f"run failed: {e}", returncode=3) from e

        self._print_summary(metrics)
        duration_ms = int((time.monotonic() - started) * 1000)
        try:
            ExperimentRun.record(config_echo, config.filters, metrics, code_version, run_config.out, duration_ms)
        except DatabaseError as e:
            logger.warning(f"Could not record run in the registry: {e}")

        self.stdout.write(self.style.SUCCESS(f"Wrote results to {run_config.out}"))

    def _print_summary(self, metrics):
        self.stdout.write(f"{'filter':<8} {'steady RMSE (m)':>16} {'diverged':>10} {'ms/step':>9} {'proj/epoch':>11}")
        for name, m in metrics.items():
            rmse = 'n/a' if np.isnan(m.steady_state_rmse) else f"{m.steady_state_rmse:.3f}"
            line = (
                f"{name:<8} {rmse:>16} {f'{m.diverged}/{m.trials}':>10} "
                f"{m.mean_step_time * 1e3:>9.3f} {m.mean_projected_per_epoch:>11.2f}"
            )
            self.stdout.write(self.style.WARNING(line) if m.diverged else line)
