"""
Consensus-filtered, importance-weighted fusion
==============================================

For K task vectors tau_k = theta_k - theta_pre the fused parameters are

    theta_fused = theta_pre + sum_k W_k * tau_k        (element-wise)

Stage 1 (consensus filtering) votes on the sign of every element and keeps the
tasks on the majority side: the active set S_i. Stage 2 (importance weighting)
normalises exp(beta * |tau_ki|) over S_i with a masked softmax; tasks outside
S_i get weight 0.

All arithmetic is float32. Every reduction over K runs on values sorted per
element, so the output is bit-identical for any ordering of the tasks and any
worker count.
"""
import logging
import math
import re
from dataclasses import dataclass, field
from enum import Enum, IntEnum

import numpy as np

from .exceptions import AlignmentError, ConfigError

logger = logging.getLogger(__name__)


class FusionMode(str, Enum):
    FULL = 'full'
    NO_FILTER = 'no_filter'   # stage-1 ablation: uniform weights over all tasks
    NO_WEIGHT = 'no_weight'   # stage-2 ablation: raw sum over S_i
    AVERAGE = 'average'       # plain task-vector average

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).replace('-', '_'))
        except ValueError:
            raise ConfigError(f"invalid mode {value!r}; choose from {', '.join(m.value for m in cls)}") from None


class ZeroSignPolicy(str, Enum):
    POSITIVE = 'positive'
    EPSILON_ABSTAIN = 'epsilon_abstain'


class Branch(IntEnum):
    POSITIVE_MAJORITY = 0
    NEGATIVE_MAJORITY = 1
    NO_CONSENSUS = 2


@dataclass(frozen=True)
class TensorFilter:
    """Regex include/exclude rules on tensor names; an empty include list admits everything."""

    include: tuple = ()
    exclude: tuple = ()

    def __post_init__(self):
        for pattern in (*self.include, *self.exclude):
            try:
                re.compile(pattern)
            except re.error as exc:
                raise ConfigError(f"invalid tensor pattern {pattern!r}: {exc}") from exc

    def matches(self, name):
        if self.include and not any(re.search(p, name) for p in self.include):
            return False
        return not any(re.search(p, name) for p in self.exclude)


MISSING_POLICIES = ('passthrough', 'error')


@dataclass(frozen=True)
class FusionConfig:
    mode: FusionMode = FusionMode.FULL
    delta: float | None = None   # None -> K/2
    beta: float = 1.0
    zero_sign_policy: ZeroSignPolicy = ZeroSignPolicy.POSITIVE
    epsilon: float = 0.0
    tensor_filter: TensorFilter = field(default_factory=TensorFilter)
    missing_tensors: str = 'passthrough'

    def __post_init__(self):
        object.__setattr__(self, 'mode', FusionMode.parse(self.mode))
        try:
            object.__setattr__(self, 'zero_sign_policy', ZeroSignPolicy(self.zero_sign_policy))
        except ValueError:
            raise ConfigError(f"invalid zero-sign policy {self.zero_sign_policy!r}") from None
        if not (math.isfinite(self.beta) and self.beta > 0):
            raise ConfigError(f"beta must be > 0, got {self.beta}")
        if not (math.isfinite(self.epsilon) and self.epsilon >= 0):
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.delta is not None and not (math.isfinite(self.delta) and self.delta >= 0):
            raise ConfigError(f"delta must be >= 0, got {self.delta}")
        if self.missing_tensors not in MISSING_POLICIES:
            raise ConfigError(f"missing-tensor policy must be one of {MISSING_POLICIES}")

    @property
    def abstains(self):
        return self.zero_sign_policy is ZeroSignPolicy.EPSILON_ABSTAIN and self.epsilon > 0

    def resolve_delta(self, k):
        delta = k / 2 if self.delta is None else float(self.delta)
        if not 0 <= delta <= k:
            raise ConfigError(f"delta must lie in [0, K={k}], got {delta}")
        return delta


@dataclass(frozen=True)
class ElementConsensus:
    """Stage-1 outcome for a block of n elements."""

    votes: np.ndarray    # (n,) positive vote count V_i
    active: np.ndarray   # (K, n) bool, column i is S_i
    branch: np.ndarray   # (n,) Branch codes

    def __len__(self):
        return self.votes.shape[0]

    @property
    def active_size(self):
        return self.active.sum(axis=0)


# ============================================
# STATISTICS
# ============================================

@dataclass(frozen=True)
class ConsensusStats:
    """Additive per-block statistics; ``a + b`` merges two blocks or tensors."""

    k: int
    elements: int = 0
    positive_majority: int = 0
    negative_majority: int = 0
    no_consensus: int = 0
    active_histogram: tuple = ()   # index = |S_i|, length K + 1
    entropy_sum: float = 0.0
    updated_elements: int = 0

    def __post_init__(self):
        if not self.active_histogram:
            object.__setattr__(self, 'active_histogram', (0,) * (self.k + 1))

    def __add__(self, other):
        if other.k != self.k:
            raise AlignmentError(f"cannot combine statistics for K={self.k} and K={other.k}")
        return ConsensusStats(
            k=self.k,
            elements=self.elements + other.elements,
            positive_majority=self.positive_majority + other.positive_majority,
            negative_majority=self.negative_majority + other.negative_majority,
            no_consensus=self.no_consensus + other.no_consensus,
            active_histogram=tuple(a + b for a, b in zip(self.active_histogram, other.active_histogram)),
            entropy_sum=self.entropy_sum + other.entropy_sum,
            updated_elements=self.updated_elements + other.updated_elements,
        )

    @property
    def mean_weight_entropy(self):
        return self.entropy_sum / self.elements if self.elements else 0.0

    @property
    def branch_counts(self):
        return {
            'positive_majority': self.positive_majority,
            'negative_majority': self.negative_majority,
            'no_consensus': self.no_consensus,
        }

    @property
    def histogram(self):
        return {size: count for size, count in enumerate(self.active_histogram) if count}


@dataclass(frozen=True)
class ConsensusReport:
    mode: FusionMode
    k: int
    delta: float
    beta: float
    zero_sign_policy: ZeroSignPolicy
    epsilon: float
    totals: ConsensusStats
    per_tensor: dict = field(default_factory=dict)
    passthrough: tuple = ()
    timings: object = None

    @property
    def d(self):
        return self.totals.elements


# ============================================
# OPERATIONS
# ============================================

def task_vector(base_tensor, task_tensor):
    """tau = task - base, element-wise in float32."""
    base = np.asarray(base_tensor, dtype=np.float32).ravel()
    task = np.asarray(task_tensor, dtype=np.float32).ravel()
    if base.shape != task.shape:
        raise AlignmentError(f"length mismatch: base has {base.size} elements, task has {task.size}")
    return np.subtract(task, base, dtype=np.float32)


def stack_task_vectors(taus):
    """(K, n) float32 view of K aligned task vectors."""
    if isinstance(taus, np.ndarray) and taus.ndim == 2:
        stacked = taus.astype(np.float32, copy=False)
    else:
        rows = [np.asarray(tau, dtype=np.float32).ravel() for tau in taus]
        if not rows:
            raise AlignmentError("at least one task vector is required")
        if len({row.size for row in rows}) > 1:
            raise AlignmentError(f"misaligned task vectors with lengths {[row.size for row in rows]}")
        stacked = np.stack(rows)
    if stacked.shape[0] < 1:
        raise AlignmentError("at least one task vector is required")
    return stacked


def ordered_sum(values):
    """Sum over axis 0 after sorting each column, so the result ignores row order."""
    ordered = np.sort(values, axis=0)
    total = ordered[0].copy()
    for row in ordered[1:]:
        total += row
    return total


def consensus_filter(taus, cfg):
    """Stage 1: per-element sign vote, branch and active set S_i."""
    taus = stack_task_vectors(taus)
    k, n = taus.shape
    delta = cfg.resolve_delta(k)
    positive = taus >= 0

    if cfg.abstains:
        voting = np.abs(taus) >= cfg.epsilon
        votes = (positive & voting).sum(axis=0)
        voters = voting.sum(axis=0)
        threshold = delta * voters / k
        pos_major = votes > threshold
        neg_major = ~pos_major & (votes < voters - threshold)
        pos_side = positive & voting
        neg_side = ~positive & voting
    else:
        votes = positive.sum(axis=0)
        pos_major = votes > delta
        # the first case of the rule wins when a lenient delta makes both hold
        neg_major = ~pos_major & (votes < k - delta)
        pos_side = positive
        neg_side = ~positive

    active = np.ones((k, n), dtype=bool)
    active = np.where(pos_major, pos_side, active)
    active = np.where(neg_major, neg_side, active)
    empty = ~active.any(axis=0)
    if empty.any():
        logger.warning(f"{int(empty.sum())} elements had an empty active set; using all tasks")
        active[:, empty] = True

    branch = np.full(n, Branch.NO_CONSENSUS, dtype=np.int8)
    branch[neg_major] = Branch.NEGATIVE_MAJORITY
    branch[pos_major] = Branch.POSITIVE_MAJORITY
    return ElementConsensus(votes=votes, active=active, branch=branch)


def importance_weights(taus, consensus, cfg):
    """Stage 2: masked softmax of beta*|tau| over S_i; zero outside S_i."""
    taus = stack_task_vectors(taus)
    if taus.shape != consensus.active.shape:
        raise AlignmentError(f"consensus computed for {consensus.active.shape}, task vectors are {taus.shape}")
    scores = np.where(consensus.active, np.abs(taus) * np.float32(cfg.beta), np.float32(-np.inf))
    peak = scores.max(axis=0)
    with np.errstate(invalid='ignore'):
        expo = np.exp(scores - peak)
    return expo / ordered_sum(expo)


def _entropy(weights):
    with np.errstate(divide='ignore', invalid='ignore'):
        terms = np.where(weights > 0, weights * np.log(weights), 0.0)
    return float(-terms.sum(dtype=np.float64))


def fuse_block(base_tensor, taus, cfg, invert_active_set=False):
    """
    Fuse one aligned block and collect its statistics.

    ``invert_active_set`` flips S_i before weighting; it exists only so the
    self-validation harness can prove it detects a broken mask.

    :return: (fused float32 values, ConsensusStats)
    """
    base = np.asarray(base_tensor, dtype=np.float32).ravel()
    taus = stack_task_vectors(taus)
    k, n = taus.shape
    if base.size != n:
        raise AlignmentError(f"base block has {base.size} elements, task vectors have {n}")

    consensus = consensus_filter(taus, cfg)
    if invert_active_set:
        consensus = ElementConsensus(votes=consensus.votes, active=~consensus.active, branch=consensus.branch)
    sizes = consensus.active_size

    if cfg.mode is FusionMode.FULL:
        weights = importance_weights(taus, consensus, cfg)
        update = ordered_sum(weights * taus)
        entropy = _entropy(weights)
    elif cfg.mode is FusionMode.NO_WEIGHT:
        update = ordered_sum(np.where(consensus.active, taus, np.float32(0)))
        entropy = float(np.log(np.maximum(sizes, 1)).sum(dtype=np.float64))
    else:
        update = ordered_sum(taus) / np.float32(k)
        entropy = n * math.log(k)

    fused = base + update
    counts = np.bincount(consensus.branch, minlength=len(Branch))
    stats = ConsensusStats(
        k=k,
        elements=n,
        positive_majority=int(counts[Branch.POSITIVE_MAJORITY]),
        negative_majority=int(counts[Branch.NEGATIVE_MAJORITY]),
        no_consensus=int(counts[Branch.NO_CONSENSUS]),
        active_histogram=tuple(int(c) for c in np.bincount(sizes, minlength=k + 1)[:k + 1]),
        entropy_sum=entropy,
        updated_elements=int(np.count_nonzero(fused != base)),
    )
    return fused, stats


def fuse_tensor(base_tensor, taus, cfg):
    """theta_pre + sum_k W_k * tau_k for one tensor, per ``cfg.mode``."""
    fused, _ = fuse_block(base_tensor, taus, cfg)
    return fused
