from dice.exceptions import ConfigError
from dice.reporting import SIM_COLUMNS, report
from dice.serializers import SimConfigSerializer, SimResultSerializer
from dice.simulation import simulate, sweep

from ..base import DiceCommand


def parse_sweep(value):
    """``"k=1,3,5;p=0.6,0.7"`` -> ({'k': [1, 3, 5], 'p': [0.6, 0.7]})."""
    grid = {}
    for part in filter(None, (piece.strip() for piece in value.split(';'))):
        key, sep, values = part.partition('=')
        key = key.strip().lower()
        if not sep or key not in ('k', 'p') or key in grid:
            raise ConfigError(f"invalid --sweep term {part!r}; expected k=... and/or p=...")
        cast = int if key == 'k' else float
        try:
            grid[key] = [cast(item) for item in values.split(',') if item.strip()]
        except ValueError:
            raise ConfigError(f"invalid --sweep values {values!r} for {key}") from None
        if not grid[key]:
            raise ConfigError(f"--sweep {key}= needs at least one value")
    if not grid:
        raise ConfigError("--sweep needs k=... and/or p=...")
    return grid


class Command(DiceCommand):
    help = 'Monte Carlo error rates of consensus filtering versus plain averaging.'

    def add_arguments(self, parser):
        parser.add_argument('--p', type=float, help='Probability that a task update has the correct sign.')
        parser.add_argument('--k', type=int, help='Number of tasks.')
        parser.add_argument('--trials', type=int, default=100_000)
        parser.add_argument('--seed', type=int, default=0)
        parser.add_argument('--delta', type=float, default=None, help='Vote threshold (default K/2).')
        parser.add_argument('--magnitudes', choices=['unit', 'lognormal'], default='lognormal')
        parser.add_argument('--mu', type=float, default=0.0, help='Lognormal mu of update magnitudes.')
        parser.add_argument('--sigma', type=float, default=1.0, help='Lognormal sigma of update magnitudes.')
        parser.add_argument('--workers', type=int, default=1,
                            help='Worker threads; results depend on the seed and this count.')
        parser.add_argument('--sweep', metavar='SPEC', help='Grid such as "k=1,3,5,9,15" or "k=3,5;p=0.6,0.7".')
        parser.add_argument('--out', metavar='PATH', help='Write results as JSON (and CSV beside it).')

    def handle(self, *args, **options):
        grid = parse_sweep(options['sweep']) if options['sweep'] else {}
        p = options['p'] if options['p'] is not None else grid.get('p', [None])[0]
        k = options['k'] if options['k'] is not None else grid.get('k', [None])[0]
        cfg = self.validated(SimConfigSerializer, {
            'p': p,
            'k': k,
            'trials': options['trials'],
            'seed': options['seed'],
            'delta': options['delta'],
            'magnitudes': options['magnitudes'],
            'mu': options['mu'],
            'sigma': options['sigma'],
            'workers': options['workers'],
        })

        results = sweep(cfg, ks=grid.get('k'), ps=grid.get('p')) if grid else [simulate(cfg)]
        written = report(results, options['out']) if options['out'] else []

        self.say(options, ','.join(SIM_COLUMNS))
        for result in results:
            self.say(options, f"{result.p},{result.k},{result.trials},{result.filtered_err:.6f},{result.avg_err:.6f},"
                              f"{result.exact_err:.6f},{result.hoeffding:.6f},{result.half_width:.6f}")
        self.summarize(
            options,
            results=SimResultSerializer(results, many=True).data,
            reports=[str(path) for path in written],
        )
