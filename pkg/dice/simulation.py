"""
Monte Carlo check of consensus filtering against plain averaging.

Interference model: each of K tasks proposes an update for one parameter whose
sign matches the true direction s* (taken as +1) with probability p, with a
magnitude drawn from ``magnitude_dist``. The filtered estimator follows the
Stage-1 vote and errs unless the positive-majority branch fires; a tie or a
no-consensus element counts as an error. The averaging estimator errs when the
plain mean of the signed updates is not strictly positive.

Exact error of the vote is the binomial tail P(X <= floor(delta)); the
Hoeffding bound exp(-2m(p-0.5)^2) must dominate it.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, logsumexp

from .exceptions import ConfigError

logger = logging.getLogger(__name__)

Z_95 = 1.96
BATCH_TRIALS = 1 << 16


def _check_p(p):
    if not (isinstance(p, (int, float)) and 0.5 < p <= 1.0):
        raise ConfigError(f"p must exceed 0.5 and be at most 1, got {p}")


def _check_m(m):
    if isinstance(m, bool) or not isinstance(m, (int, np.integer)) or m < 1:
        raise ConfigError(f"m must be an integer >= 1, got {m}")


def hoeffding_bound(m, p):
    """exp(-2 m (p - 0.5)^2)."""
    _check_m(m)
    _check_p(p)
    return math.exp(-2.0 * m * (p - 0.5) ** 2)


def binomial_lower_tail(m, p, threshold):
    """P(X <= threshold) for X ~ Binomial(m, p), summed in log space."""
    if threshold < 0:
        return 0.0
    if threshold >= m:
        return 1.0
    if p == 1.0:
        return 0.0
    x = np.arange(int(threshold) + 1)
    log_terms = (gammaln(m + 1) - gammaln(x + 1) - gammaln(m - x + 1)
                 + x * math.log(p) + (m - x) * math.log1p(-p))
    return float(min(1.0, math.exp(logsumexp(log_terms))))


def exact_majority_error(m, p):
    """P(X <= floor(m/2)): the vote of m p-biased tasks fails to be a strict majority."""
    _check_m(m)
    _check_p(p)
    return binomial_lower_tail(m, p, m // 2)


def confidence_half_width(rate, trials, z=Z_95):
    return z * math.sqrt(rate * (1.0 - rate) / trials)


@dataclass(frozen=True)
class MagnitudeDist:
    kind: str = 'lognormal'   # 'unit' or 'lognormal'
    mu: float = 0.0
    sigma: float = 1.0

    def __post_init__(self):
        if self.kind not in ('unit', 'lognormal'):
            raise ConfigError(f"magnitude distribution must be 'unit' or 'lognormal', got {self.kind!r}")
        if self.sigma < 0:
            raise ConfigError(f"lognormal sigma must be >= 0, got {self.sigma}")

    def draw(self, rng, size):
        if self.kind == 'unit':
            return np.ones(size)
        return rng.lognormal(self.mu, self.sigma, size)


@dataclass(frozen=True)
class SimConfig:
    p: float
    k: int
    trials: int = 100_000
    seed: int = 0
    delta: float | None = None   # None -> K/2
    magnitudes: MagnitudeDist = field(default_factory=MagnitudeDist)
    workers: int = 1

    def __post_init__(self):
        _check_p(self.p)
        if isinstance(self.k, bool) or not isinstance(self.k, int) or self.k < 1:
            raise ConfigError(f"K must be an integer >= 1, got {self.k}")
        if not isinstance(self.trials, int) or self.trials < 1:
            raise ConfigError(f"trials must be >= 1, got {self.trials}")
        if not isinstance(self.workers, int) or self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if not 0 <= self.resolved_delta <= self.k:
            raise ConfigError(f"delta must lie in [0, K={self.k}], got {self.delta}")

    @property
    def resolved_delta(self):
        return self.k / 2 if self.delta is None else float(self.delta)


@dataclass(frozen=True)
class SimResult:
    p: float
    k: int
    trials: int
    seed: int
    magnitudes: str
    filtered_err: float
    avg_err: float
    exact_err: float
    hoeffding: float
    half_width: float
    avg_half_width: float

    def agrees_with_exact(self, z=Z_95):
        """
        Whether the filtered rate lies within a z-sigma binomial band of the exact value.

        The band uses the exact rate's own variance plus one trial of slack, so
        a rare event observed zero times still counts as agreement.
        """
        band = confidence_half_width(self.exact_err, self.trials, z) + 1.0 / self.trials
        return abs(self.filtered_err - self.exact_err) <= band

    @property
    def averaging_gap(self):
        return self.avg_err - self.filtered_err


def _count_errors(cfg, trials, rng):
    """(filtered errors, averaging errors) over ``trials`` draws."""
    delta = cfg.resolved_delta
    filtered = averaged = 0
    remaining = trials
    while remaining:
        batch = min(remaining, BATCH_TRIALS)
        correct = rng.random((batch, cfg.k)) < cfg.p
        updates = np.where(correct, 1.0, -1.0) * cfg.magnitudes.draw(rng, (batch, cfg.k))
        votes = correct.sum(axis=1)
        filtered += int(np.count_nonzero(~(votes > delta)))
        averaged += int(np.count_nonzero(updates.mean(axis=1) <= 0))
        remaining -= batch
    return filtered, averaged


def _worker_rng(seed, worker):
    return np.random.default_rng(np.random.SeedSequence([seed, worker]))


def simulate(cfg):
    """Run ``cfg.trials`` trials, split into contiguous shares per worker."""
    shares = [cfg.trials // cfg.workers + (1 if w < cfg.trials % cfg.workers else 0) for w in range(cfg.workers)]
    jobs = [(share, _worker_rng(cfg.seed, worker)) for worker, share in enumerate(shares) if share]
    if len(jobs) == 1:
        counts = [_count_errors(cfg, *jobs[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(jobs)) as executor:
            counts = list(executor.map(lambda job: _count_errors(cfg, *job), jobs))

    filtered_err = sum(c[0] for c in counts) / cfg.trials
    avg_err = sum(c[1] for c in counts) / cfg.trials
    result = SimResult(
        p=cfg.p,
        k=cfg.k,
        trials=cfg.trials,
        seed=cfg.seed,
        magnitudes=cfg.magnitudes.kind,
        filtered_err=filtered_err,
        avg_err=avg_err,
        exact_err=binomial_lower_tail(cfg.k, cfg.p, math.floor(cfg.resolved_delta)),
        hoeffding=hoeffding_bound(cfg.k, cfg.p),
        half_width=confidence_half_width(filtered_err, cfg.trials),
        avg_half_width=confidence_half_width(avg_err, cfg.trials),
    )
    logger.debug(f"Simulated p={cfg.p} K={cfg.k}: filtered {filtered_err:.5f}, averaged {avg_err:.5f}")
    return result


def sweep(cfg, ks=None, ps=None):
    """Run :func:`simulate` over the cartesian product of ``ps`` x ``ks`` (p outer)."""
    results = []
    for p in ps or [cfg.p]:
        for k in ks or [cfg.k]:
            # delta is tied to K, so a sweep always uses the K/2 default
            results.append(simulate(SimConfig(
                p=p, k=k, trials=cfg.trials, seed=cfg.seed,
                delta=cfg.delta if not ks else None,
                magnitudes=cfg.magnitudes, workers=cfg.workers,
            )))
    return results
