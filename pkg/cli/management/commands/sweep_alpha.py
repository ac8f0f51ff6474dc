import numpy as np
from django.core.management.base import BaseCommand, CommandError

from cli.logic import check_alpha, parse_float_list, resolve_run_config
from core.exceptions import ConfigError, TrackingError
from harness.logic import compute_metrics, run_experiment

SWEEP_FILTER = "csrukf"


class Command(BaseCommand):
    help = 'Run the constrained filter for several confidence levels: accuracy against projection work'

    def add_arguments(self, parser):
        parser.add_argument('--scenario', required=True, help='Scenario TOML file')
        parser.add_argument('--alphas', default='0.65,0.7,0.75,0.8,0.85', help='Comma-separated confidence levels')
        parser.add_argument('--trials', type=int)
        parser.add_argument('--steps', type=int)
        parser.add_argument('--seed', type=int)
        parser.add_argument('--epsilon', type=float)
        parser.add_argument('--threads', type=int)

    def handle(self, *args, **options):
        try:
            alphas = [check_alpha(a) for a in parse_float_list(options['alphas'], label='alphas')]
            run_config = resolve_run_config(
                options['scenario'], SWEEP_FILTER, options.get('trials'), options.get('steps'),
                options.get('seed'), None, options.get('epsilon'), None, options.get('threads'),
            )
            base = run_config.load()
        except ConfigError as e:
            raise CommandError(f"config error: {e}", returncode=2) from e

        self.stdout.write(f"'{base.name}': {base.trials} trials x {base.steps} epochs, seed {base.seed}")
        self.stdout.write(f"{'alpha':>6} {'steady RMSE (m)':>16} {'proj/epoch':>11} {'ms/step':>9} {'diverged':>9}")
        for alpha in alphas:
            config = base.with_overrides(alpha=alpha)
            try:
                records = run_experiment(config, (SWEEP_FILTER,), workers=run_config.workers)
                m = compute_metrics(records, (SWEEP_FILTER,), config.steady_fraction)[SWEEP_FILTER]
            except (TrackingError, np.linalg.LinAlgError) as e:
                raise CommandError(f"sweep failed at alpha {alpha}: {e}", returncode=3) from e
            rmse = 'n/a' if np.isnan(m.steady_state_rmse) else f"{m.steady_state_rmse:.3f}"
            self.stdout.write(
                f"{alpha:>6.3f} {rmse:>16} {m.mean_projected_per_epoch:>11.2f} "
                f"{m.mean_step_time * 1e3:>9.3f} {m.diverged:>9}"
            )
        self.stdout.write(self.style.SUCCESS(f"Swept {len(alphas)} confidence levels"))
