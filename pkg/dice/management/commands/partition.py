from dice.partition import load_records, partition
from dice.reporting import write_partition
from dice.serializers import OverlapMatrixSerializer, PartitionConfigSerializer

from ..base import DiceCommand


class Command(DiceCommand):
    help = 'Split a JSON-lines corpus into tool-aware subsets with train/test splits.'

    def add_arguments(self, parser):
        parser.add_argument('--input', required=True, metavar='PATH', help='JSON-lines corpus.')
        parser.add_argument('--subsets', type=int, required=True, help='Number of subsets M.')
        parser.add_argument('--ratio', type=float, required=True, help='Training ratio r in (0, 1].')
        parser.add_argument('--seed', type=int, default=0, help='Shuffle seed.')
        parser.add_argument('--tools-field', default='tools', metavar='JSONPATH',
                            help='Where each record lists its tools, e.g. "tools" or "$.meta.apis".')
        parser.add_argument('--id-field', default='id', help='Record id field (default: line number).')
        parser.add_argument('--deterministic-order', action='store_true',
                            help='Skip the shuffle and assign records in file order.')
        parser.add_argument('--outdir', required=True, metavar='DIR')

    def handle(self, *args, **options):
        cfg = self.validated(PartitionConfigSerializer, {
            'subsets': options['subsets'],
            'ratio': options['ratio'],
            'seed': options['seed'],
            'deterministic_order': options['deterministic_order'],
        })
        records = load_records(options['input'], options['tools_field'], options['id_field'])
        splits, matrix = partition(records, cfg)
        write_partition(options['outdir'], splits, matrix)

        for m, (train, test) in enumerate(splits):
            self.say(options, f"subset {m}: {len(train)} train, {len(test)} test")
        self.say(options, self.style.SUCCESS(f"Wrote {len(splits)} subsets and overlap.json to {options['outdir']}"))
        self.summarize(
            options,
            records=len(records),
            sizes=[{'train': len(train), 'test': len(test)} for train, test in splits],
            overlap=OverlapMatrixSerializer(matrix).data,
            outdir=str(options['outdir']),
        )
