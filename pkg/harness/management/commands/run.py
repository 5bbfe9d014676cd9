from pathlib import Path

import yaml
from django.conf import settings
from django.core.exceptions import ValidationError
from django.core.management.base import BaseCommand, CommandError

from harness.experiments import EXPERIMENTS
from harness.serializers import load_run_config
from harness.tasks import run_experiment


class Command(BaseCommand):
    help = "Run a named experiment: one CSV per (sweep cell, agent, seed) plus an aggregate CSV."

    def add_arguments(self, parser):
        parser.add_argument('experiment', help="Experiment name, see list_experiments.")
        parser.add_argument('--config', help="YAML run config (default: configs/<experiment>.yaml).")
        parser.add_argument('--fast', action='store_true',
                            help="Desk-scale profile: at most 60k CartPole steps and three seeds.")
        parser.add_argument('--workers', type=int, default=None, help="Parallel jobs (default: OMD_WORKERS).")
        parser.add_argument('--out', help="Output directory (default: OMD_OUTPUT_ROOT/<experiment>).")

    def handle(self, *args, **options):
        name = options['experiment']
        if name not in EXPERIMENTS:
            raise CommandError(f"Unknown experiment {name!r}; choose from {', '.join(sorted(EXPERIMENTS))}.")
        if options['workers'] is not None and options['workers'] < 1:
            raise CommandError("--workers must be at least 1.")

        path = Path(options['config'] or Path(settings.OMD_CONFIG_ROOT) / f'{name}.yaml')
        if not path.is_file():
            raise CommandError(f"Config file {path} does not exist.")
        try:
            config = load_run_config(path)
        except yaml.YAMLError as exc:
            raise CommandError(f"{path} is not valid YAML: {exc}")
        except ValidationError as exc:
            raise CommandError(f"Invalid config {path}:\n  " + "\n  ".join(exc.messages))
        if config.experiment != name:
            raise CommandError(f"{path} configures {config.experiment!r}, not {name!r}.")
        if options['fast']:
            config = config.fast()

        self.stdout.write(f"Running {config}")
        records, summary = run_experiment(config, options['out'], options['workers'])
        failed = [record for record in records if record.status != 'ok']
        for record in failed:
            self.stderr.write(self.style.WARNING(f"{record.job.name}: {record.status} ({record.message})"))
        if summary is None:
            raise CommandError(f"All {len(records)} jobs of {name} failed.")
        self.stdout.write(summary.to_string(index=False))
        self.stdout.write(self.style.SUCCESS(f"{len(records) - len(failed)} of {len(records)} jobs succeeded."))
