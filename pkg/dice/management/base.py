"""
Shared base for the agentdice management commands.

Maps every failure onto the exit-code contract in one place and adds the
``--json`` one-line summary flag.
"""
import logging

from django.core.management.base import BaseCommand, CommandError
from rest_framework import serializers
from rest_framework.renderers import JSONRenderer

from ..exceptions import EXIT_IO, EXIT_USAGE, DiceError

logger = logging.getLogger(__name__)


def flatten_errors(detail, prefix=''):
    """Turn DRF error detail (nested dicts and lists) into one line."""
    if isinstance(detail, dict):
        return '; '.join(
            flatten_errors(value, f'{key}: ' if key != 'non_field_errors' else '')
            for key, value in detail.items()
        )
    if isinstance(detail, list):
        return '; '.join(flatten_errors(item, prefix) for item in detail)
    return f'{prefix}{detail}'


class DiceCommand(BaseCommand):
    # no models, no database: Django's system checks have nothing to look at
    requires_system_checks = []

    def create_parser(self, prog_name, subcommand, **kwargs):
        parser = super().create_parser(prog_name, subcommand, **kwargs)
        parser.add_argument(
            '--json', action='store_true', dest='json_summary',
            help='Print a one-line JSON summary of the run on stdout.',
        )
        # argparse exits with 2 on bad flags, which is the data-error code here
        argparse_exit = parser.exit
        parser.exit = lambda status=0, message=None: argparse_exit(EXIT_USAGE if status == 2 else status, message)
        return parser

    def execute(self, *args, **options):
        try:
            return super().execute(*args, **options)
        except CommandError as exc:
            self._summarize_failure(options, exc.returncode, str(exc))
            raise
        except serializers.ValidationError as exc:
            code, message = EXIT_USAGE, flatten_errors(exc.detail)
        except DiceError as exc:
            code, message = exc.exit_code, str(exc)
        except OSError as exc:
            code, message = EXIT_IO, f"I/O error: {exc}"
        logger.debug(f"{self.command_name} failed with exit code {code}: {message}")
        self._summarize_failure(options, code, message)
        raise CommandError(message, returncode=code)

    @property
    def command_name(self):
        return self.__module__.rsplit('.', 1)[-1]

    def validated(self, serializer_class, data, context=None):
        """Validate ``data`` with a config serializer and return the built config object."""
        serializer = serializer_class(data=data, context=context or {})
        serializer.is_valid(raise_exception=True)
        return serializer.save()

    def say(self, options, message):
        """Human-readable result line; suppressed under --json so stdout stays parseable."""
        if not options.get('json_summary'):
            self.stdout.write(message)

    def summarize(self, options, **fields):
        if options.get('json_summary'):
            document = {'command': self.command_name, 'status': 'ok', **fields}
            self.stdout.write(JSONRenderer().render(document).decode('utf-8'))

    def _summarize_failure(self, options, code, message):
        if options.get('json_summary'):
            document = {'command': self.command_name, 'status': 'error', 'exit_code': code, 'error': message}
            self.stdout.write(JSONRenderer().render(document).decode('utf-8'))
