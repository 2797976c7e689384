from django.conf import settings

from dice.fusion import FusionMode, ZeroSignPolicy
from dice.merge import merge_checkpoints
from dice.reporting import report
from dice.serializers import FusionConfigSerializer, PhaseTimingsSerializer

from ..base import DiceCommand


class Command(DiceCommand):
    help = 'Fuse task checkpoints into a base checkpoint with consensus filtering and importance weighting.'

    def add_arguments(self, parser):
        parser.add_argument('--base', required=True, metavar='PATH', help='Pre-trained checkpoint.')
        parser.add_argument('--task', action='append', required=True, dest='tasks', metavar='PATH',
                            help='Fine-tuned checkpoint; repeat once per task.')
        parser.add_argument('--out', required=True, metavar='PATH', help='Fused checkpoint to write.')
        parser.add_argument('--mode', default='full',
                            choices=[mode.value.replace('_', '-') for mode in FusionMode])
        parser.add_argument('--beta', type=float, default=1.0, help='Softmax temperature on |tau|.')
        parser.add_argument('--delta', type=float, default=None, help='Vote threshold (default K/2).')
        parser.add_argument('--zero-sign', default='positive',
                            choices=[policy.value.replace('_', '-') for policy in ZeroSignPolicy])
        parser.add_argument('--epsilon', type=float, default=0.0,
                            help='With --zero-sign epsilon-abstain, |tau| below this does not vote.')
        parser.add_argument('--include', nargs='+', action='extend', default=[], metavar='PATTERN',
                            help='Only fuse tensors whose name matches one of these regexes.')
        parser.add_argument('--exclude', nargs='+', action='extend', default=[], metavar='PATTERN',
                            help='Copy tensors matching these regexes from the base unchanged.')
        parser.add_argument('--missing', choices=['passthrough', 'error'], default=settings.AGENTDICE_MISSING_TENSORS,
                            help='What to do with base tensors absent from a task checkpoint.')
        parser.add_argument('--report', metavar='PATH', help='Write the consensus report (JSON, CSV beside it).')
        parser.add_argument('--threads', type=int, default=None,
                            help='Worker threads (default AGENTDICE_THREADS).')

    def handle(self, *args, **options):
        cfg = self.validated(FusionConfigSerializer, {
            'mode': options['mode'],
            'beta': options['beta'],
            'delta': options['delta'],
            'zero_sign_policy': options['zero_sign'].replace('-', '_'),
            'epsilon': options['epsilon'],
            'include': options['include'],
            'exclude': options['exclude'],
            'missing_tensors': options['missing'],
        }, context={'tasks': len(options['tasks'])})

        result = merge_checkpoints(options['base'], options['tasks'], cfg, options['out'], threads=options['threads'])
        written = report(result, options['report']) if options['report'] else []

        timings = result.timings
        self.say(options, self.style.SUCCESS(
            f"Merged {timings.tensors} tensors ({timings.fused_tensors} fused, "
            f"{len(result.passthrough)} copied) into {options['out']} in {timings.wall_seconds:.3f}s"
        ))
        self.say(options, f"  header {timings.header_seconds:.3f}s | compute {timings.compute_seconds:.3f}s | "
                          f"write {timings.write_seconds:.3f}s")
        self.say(options, f"  {timings.bytes_read} bytes read, {timings.bytes_written} bytes written, "
                          f"{timings.throughput_mb_s:.1f} MB/s on {timings.threads} threads")
        self.say(options, f"  {result.totals.updated_elements}/{result.d} elements updated, "
                          f"mean weight entropy {result.totals.mean_weight_entropy:.4f}")
        self.summarize(
            options,
            out=str(options['out']),
            reports=[str(path) for path in written],
            mode=cfg.mode.value,
            k=result.k,
            d=result.d,
            updated_elements=result.totals.updated_elements,
            timings=PhaseTimingsSerializer(timings).data,
        )
