from dice.analysis import load_metric_table, zscores
from dice.reporting import report
from dice.serializers import ZScoreResultSerializer

from ..base import DiceCommand


class Command(DiceCommand):
    help = 'Per-task Z-scores and AvgZ from a method x task score table.'

    def add_arguments(self, parser):
        parser.add_argument('--table', required=True, metavar='CSV',
                            help='CSV with a method column followed by one column per task.')
        parser.add_argument('--baseline', nargs='+', action='extend', default=[], metavar='METHOD',
                            help='Rows defining the per-task mean and std (default: all rows).')
        parser.add_argument('--out', metavar='PATH', help='Write JSON (and CSV beside it).')

    def handle(self, *args, **options):
        table = load_metric_table(options['table'], baselines=options['baseline'])
        result = zscores(table)
        written = report(result, options['out']) if options['out'] else []

        self.say(options, ','.join(['method', *(f'Z_{task}' for task in result.tasks), 'AvgZ']))
        for method, row, avgz in zip(result.methods, result.z, result.avgz):
            self.say(options, ','.join([method, *(f'{value:.4f}' for value in row), f'{avgz:.4f}']))
        self.summarize(options, zscores=ZScoreResultSerializer(result).data, reports=[str(path) for path in written])
