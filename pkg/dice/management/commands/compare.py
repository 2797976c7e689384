from dice.analysis import SIMILARITY_METRICS, compare_checkpoints, compare_many
from dice.exceptions import ConfigError
from dice.reporting import report
from dice.serializers import SimilarityMatrixSerializer, TensorSimilaritySerializer

from ..base import DiceCommand


class Command(DiceCommand):
    help = 'Parameter-space similarity (L2, cosine, sign agreement, histogram KL) between checkpoints.'

    def add_arguments(self, parser):
        parser.add_argument('checkpoints', nargs='+', metavar='PATH', help='Two or more checkpoints.')
        parser.add_argument('--labels', nargs='+', metavar='LABEL', help='One label per checkpoint.')
        parser.add_argument('--bins', type=int, default=None, help='Histogram bins (default AGENTDICE_HIST_BINS).')
        parser.add_argument('--alpha', type=float, default=None,
                            help='Histogram smoothing (default AGENTDICE_HIST_ALPHA).')
        parser.add_argument('--out', metavar='PATH', help='Write JSON (and CSV beside it).')

    def handle(self, *args, **options):
        paths = options['checkpoints']
        labels = options['labels']
        if len(paths) < 2:
            raise ConfigError("compare needs at least two checkpoints")
        if labels and len(labels) != len(paths):
            raise ConfigError(f"{len(labels)} labels for {len(paths)} checkpoints")

        if len(paths) == 2 and not labels:
            result = compare_checkpoints(paths[0], paths[1], bins=options['bins'], alpha=options['alpha'])
            overall = result.overall
            for metric in ('l2', 'cosine', 'sign_agreement', 'param_hist_kl_ab', 'param_hist_kl_ba'):
                self.say(options, f"{metric}: {getattr(overall, metric):.6g}")
            summary = {'overall': TensorSimilaritySerializer(overall).data, 'tensors': len(result.per_tensor)}
        else:
            result = compare_many(paths, labels=labels, bins=options['bins'], alpha=options['alpha'])
            for metric in SIMILARITY_METRICS:
                self.say(options, f"{metric}:")
                for label, row in zip(result.labels, result.values[metric]):
                    self.say(options, f"  {label}: " + ' '.join(f'{value:.6g}' for value in row))
            summary = {'matrix': SimilarityMatrixSerializer(result).data}

        written = report(result, options['out']) if options['out'] else []
        self.summarize(options, reports=[str(path) for path in written], **summary)
