import argparse

from django.core.management.base import CommandError

from dice.exceptions import EXIT_DATA, ConfigError
from dice.validation import run_checks

from ..base import DiceCommand


class Command(DiceCommand):
    help = 'Run the offline self-validation battery (oracle, worked example, Hoeffding sweep, I/O, invariants).'

    def add_arguments(self, parser):
        parser.add_argument('--seed', type=int, default=0)
        parser.add_argument('--instances', type=int, default=1000, help='Random instances for the oracle check.')
        # test-only: breaks the active-set mask to prove the oracle check catches it
        parser.add_argument('--inject-fault', action='store_true', help=argparse.SUPPRESS)

    def handle(self, *args, **options):
        if options['instances'] < 1:
            raise ConfigError(f"--instances must be >= 1, got {options['instances']}")
        results = run_checks(seed=options['seed'], instances=options['instances'],
                             inject_fault=options['inject_fault'])
        for result in results:
            status = self.style.SUCCESS('PASS') if result.passed else self.style.ERROR('FAIL')
            self.say(options, f"{status} {result.name} ({result.seconds:.2f}s): {result.detail}")

        failed = [result.name for result in results if not result.passed]
        if failed:
            raise CommandError(f"{len(failed)} check(s) failed: {', '.join(failed)}", returncode=EXIT_DATA)
        self.summarize(options, checks={result.name: result.detail for result in results})
