from pathlib import Path

from django.core.exceptions import ValidationError
from django.core.management.base import BaseCommand, CommandError

from harness.utils import read_job_records, write_aggregate


class Command(BaseCommand):
    help = "Aggregate the per-job CSV sidecars of a results directory into one summary CSV."

    def add_arguments(self, parser):
        parser.add_argument('--in', dest='input_dir', required=True, help="Directory holding job outputs.")
        parser.add_argument('--out', dest='output', required=True, help="Summary CSV to write.")

    def handle(self, *args, **options):
        directory = Path(options['input_dir'])
        if not directory.is_dir():
            raise CommandError(f"{directory} is not a directory.")
        records = read_job_records(directory)
        if not records:
            raise CommandError(f"No job records found in {directory}.")
        try:
            summary = write_aggregate(records, options['output'])
        except ValidationError as exc:
            raise CommandError("; ".join(exc.messages))
        self.stdout.write(summary.to_string(index=False))
        self.stdout.write(self.style.SUCCESS(f"Aggregated {len(records)} jobs into {options['output']}."))
