from pathlib import Path

from django.core.management.base import BaseCommand, CommandError

from scenarios.config import reference_scenarios, save_scenario


class Command(BaseCommand):
    help = 'Write the reference scenario files (two noise levels x 0/1/2 LOS links, false alarm, missed detection)'

    def add_arguments(self, parser):
        parser.add_argument('--out', default='scenario_files', help='Directory for the TOML files')

    def handle(self, *args, **options):
        out = Path(options['out'])
        written = []
        try:
            for config in reference_scenarios():
                written.append(save_scenario(config, out / f"{config.name}.toml"))
        except OSError as e:
            raise CommandError(f"cannot write scenarios to {out}: {e}", returncode=3) from e

        for path in written:
            self.stdout.write(f"  {path}")
        self.stdout.write(self.style.SUCCESS(f"Wrote {len(written)} scenario files to {out}"))
