from django.core.management.base import BaseCommand, CommandError

from cli.logic import parse_disc, parse_factor, parse_float_list
from core.exceptions import ConfigError
from projection.logic import InfeasibleRegion, ProjectionError, make_region, project_sigma


class Command(BaseCommand):
    help = 'Project one state onto an intersection of discs in the metric of a square-root covariance'

    def add_arguments(self, parser):
        parser.add_argument('--state', required=True, help='x,y,vx,vy')
        parser.add_argument(
            '--factor',
            help="Upper factor U with Sigma = U^T U: rows separated by ';', or one row read as the diagonal "
                 "(default: identity)",
        )
        parser.add_argument('--disc', action='append', default=[], help='cx,cy,radius (repeatable)')

    def handle(self, *args, **options):
        try:
            state = parse_float_list(options['state'], label='state')
            if len(state) < 2:
                raise ConfigError("state needs at least a position (x,y)")
            factor = parse_factor(options.get('factor'), len(state))
            region = make_region([parse_disc(d) for d in options.get('disc') or ()])
        except ConfigError as e:
            raise CommandError(f"cannot parse arguments: {e}", returncode=3) from e

        try:
            result = project_sigma(state, factor, region)
        except InfeasibleRegion as e:
            raise CommandError(f"infeasible region: {e} (certificate {e.certificate})", returncode=3) from e
        except ProjectionError as e:
            raise CommandError(f"projection failed: {e}", returncode=3) from e

        self.stdout.write("projected: " + ", ".join(f"{v:.6f}" for v in result.point))
        self.stdout.write(f"active: {'true' if result.active else 'false'}")
        self.stdout.write(f"iterations: {result.iterations}")
