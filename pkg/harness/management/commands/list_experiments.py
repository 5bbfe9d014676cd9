from django.core.management.base import BaseCommand

from harness.experiments import EXPERIMENTS


class Command(BaseCommand):
    help = "List the named experiments and the agents each accepts."

    def handle(self, *args, **options):
        for name in sorted(EXPERIMENTS):
            experiment = EXPERIMENTS[name]
            self.stdout.write(f"{self.style.SUCCESS(name)}: {experiment.description}")
            self.stdout.write(f"    agents: {', '.join(experiment.agents)}")
