"""
Post-merge analysis: parameter-space similarity and the AvgZ metric.

Similarity between two checkpoints is measured over their common tensors, per
tensor and over the concatenation: L2 distance, cosine similarity, fraction of
elements with the same sign, and the KL divergence between histograms of the
parameter values ("param_hist_kl"). The histogram KL stands in for
output-distribution KL, which would need model inference; it is reported in
both directions because it is asymmetric.
"""
import csv
import logging
import math
from contextlib import ExitStack
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from django.conf import settings

from .exceptions import AnalysisError, ConfigError, ZeroVarianceError
from .tensor_store import Checkpoint, open_checkpoint

logger = logging.getLogger(__name__)

SIMILARITY_METRICS = ('l2', 'cosine', 'sign_agreement', 'param_hist_kl')


@dataclass(frozen=True)
class TensorSimilarity:
    elements: int
    l2: float
    cosine: float
    sign_agreement: float
    param_hist_kl_ab: float
    param_hist_kl_ba: float


@dataclass(frozen=True)
class SimilarityResult:
    a: str
    b: str
    overall: TensorSimilarity
    per_tensor: dict = field(default_factory=dict)
    bins: int = 256
    alpha: float = 1e-8


@dataclass(frozen=True)
class SimilarityMatrix:
    """Pairwise metrics over N checkpoints; ``values[metric][i][j]`` (KL is i relative to j)."""

    labels: tuple
    values: dict
    bins: int = 256
    alpha: float = 1e-8


def histogram_kl(counts_p, counts_q, alpha):
    """KL(P || Q) of two histograms on shared bins with additive smoothing ``alpha``."""
    p = np.asarray(counts_p, dtype=np.float64) + alpha
    q = np.asarray(counts_q, dtype=np.float64) + alpha
    p /= p.sum()
    q /= q.sum()
    return max(0.0, float(np.sum(p * np.log(p / q))))


def _cosine(dot, norm_a2, norm_b2):
    if norm_a2 == 0 and norm_b2 == 0:
        return 1.0
    if norm_a2 == 0 or norm_b2 == 0:
        return 0.0
    return float(np.clip(dot / math.sqrt(norm_a2 * norm_b2), -1.0, 1.0))


def _joint_range(lo, hi):
    if lo == hi:
        return lo - 0.5, hi + 0.5
    return lo, hi


class _Accumulator:
    """Running sums for one pair of flattened parameter vectors."""

    def __init__(self):
        self.elements = 0
        self.diff2 = 0.0
        self.dot = 0.0
        self.norm_a2 = 0.0
        self.norm_b2 = 0.0
        self.same_sign = 0

    def add(self, a, b):
        a = a.astype(np.float64)
        b = b.astype(np.float64)
        self.elements += a.size
        self.diff2 += float(np.dot(a - b, a - b))
        self.dot += float(np.dot(a, b))
        self.norm_a2 += float(np.dot(a, a))
        self.norm_b2 += float(np.dot(b, b))
        self.same_sign += int(np.count_nonzero(np.sign(a) == np.sign(b)))

    def result(self, hist_a, hist_b, alpha):
        return TensorSimilarity(
            elements=self.elements,
            l2=math.sqrt(self.diff2),
            cosine=_cosine(self.dot, self.norm_a2, self.norm_b2),
            sign_agreement=self.same_sign / self.elements if self.elements else 1.0,
            param_hist_kl_ab=histogram_kl(hist_a, hist_b, alpha),
            param_hist_kl_ba=histogram_kl(hist_b, hist_a, alpha),
        )


def _common_tensors(a, b):
    names = [name for name in a.names if name in b and a.meta(name).shape == b.meta(name).shape]
    if not names:
        raise AnalysisError(f"no common tensors between {a.path.name} and {b.path.name}")
    return names


def compare_checkpoints(a, b, bins=None, alpha=None):
    """
    Similarity of two checkpoints (open handles or paths).

    Two streaming passes: the first accumulates distances, per-tensor
    histograms and the global value range; the second bins every tensor on the
    global range for the overall histogram KL.
    """
    bins = bins or settings.AGENTDICE_HIST_BINS
    alpha = settings.AGENTDICE_HIST_ALPHA if alpha is None else alpha
    if bins < 1 or alpha < 0:
        raise ConfigError(f"histogram needs bins >= 1 and alpha >= 0, got {bins}, {alpha}")
    with ExitStack() as stack:
        a = a if isinstance(a, Checkpoint) else stack.enter_context(open_checkpoint(a))
        b = b if isinstance(b, Checkpoint) else stack.enter_context(open_checkpoint(b))
        return _compare(a, b, bins, alpha)


def _compare(a, b, bins, alpha):
    names = _common_tensors(a, b)
    overall = _Accumulator()
    per_tensor = {}
    lo, hi = math.inf, -math.inf
    for name in names:
        values_a, _ = a.read_tensor_f32(name)
        values_b, _ = b.read_tensor_f32(name)
        acc = _Accumulator()
        acc.add(values_a, values_b)
        overall.add(values_a, values_b)
        if values_a.size:
            t_lo = float(min(values_a.min(), values_b.min()))
            t_hi = float(max(values_a.max(), values_b.max()))
            lo, hi = min(lo, t_lo), max(hi, t_hi)
            edges = _joint_range(t_lo, t_hi)
            hist_a, _ = np.histogram(values_a, bins=bins, range=edges)
            hist_b, _ = np.histogram(values_b, bins=bins, range=edges)
        else:
            hist_a = hist_b = np.zeros(bins)
        per_tensor[name] = acc.result(hist_a, hist_b, alpha)

    total_a = np.zeros(bins, dtype=np.int64)
    total_b = np.zeros(bins, dtype=np.int64)
    if overall.elements:
        edges = _joint_range(lo, hi)
        for name in names:
            total_a += np.histogram(a.read_tensor_f32(name)[0], bins=bins, range=edges)[0]
            total_b += np.histogram(b.read_tensor_f32(name)[0], bins=bins, range=edges)[0]

    logger.info(f"Compared {a.path.name} and {b.path.name} over {len(names)} tensors")
    return SimilarityResult(
        a=a.path.name,
        b=b.path.name,
        overall=overall.result(total_a, total_b, alpha),
        per_tensor=per_tensor,
        bins=bins,
        alpha=alpha,
    )


def compare_many(paths, labels=None, bins=None, alpha=None):
    """Pairwise :func:`compare_checkpoints` over N checkpoints, for heatmaps."""
    paths = list(paths)
    if len(paths) < 2:
        raise ConfigError("at least two checkpoints are needed for a similarity matrix")
    labels = tuple(labels or [str(p) for p in paths])
    n = len(paths)
    identity = {'l2': 0.0, 'cosine': 1.0, 'sign_agreement': 1.0, 'param_hist_kl': 0.0}
    values = {metric: [[identity[metric]] * n for _ in range(n)] for metric in SIMILARITY_METRICS}

    handles = [open_checkpoint(path) for path in paths]
    try:
        result = None
        for i, j in combinations(range(n), 2):
            result = compare_checkpoints(handles[i], handles[j], bins=bins, alpha=alpha)
            overall = result.overall
            for metric in ('l2', 'cosine', 'sign_agreement'):
                values[metric][i][j] = values[metric][j][i] = getattr(overall, metric)
            values['param_hist_kl'][i][j] = overall.param_hist_kl_ab
            values['param_hist_kl'][j][i] = overall.param_hist_kl_ba
    finally:
        for handle in handles:
            handle.close()
    return SimilarityMatrix(labels=labels, values=values, bins=result.bins, alpha=result.alpha)


# ============================================
# Z-SCORES
# ============================================

@dataclass(frozen=True)
class MetricTable:
    """Scores of methods (rows) on tasks (columns); ``baselines`` name the rows defining mu and sigma."""

    tasks: tuple
    methods: tuple
    scores: np.ndarray
    baselines: tuple = ()

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        object.__setattr__(self, 'scores', scores)
        if scores.shape != (len(self.methods), len(self.tasks)):
            raise ConfigError(f"score matrix is {scores.shape}, expected {(len(self.methods), len(self.tasks))}")
        baselines = tuple(self.baselines) or tuple(self.methods)
        unknown = [name for name in baselines if name not in self.methods]
        if unknown:
            raise ConfigError(f"unknown baseline methods: {', '.join(unknown)}")
        if len(baselines) < 2:
            raise AnalysisError("z-scores need at least two baseline methods per task")
        object.__setattr__(self, 'baselines', baselines)


@dataclass(frozen=True)
class ZScoreResult:
    tasks: tuple
    methods: tuple
    mu: tuple
    sigma: tuple
    z: tuple       # per method, per task
    avgz: tuple    # per method


def zscores(table):
    """Z = (M - mu) / sigma per task with population sigma over the baseline rows; AvgZ = row mean."""
    rows = [table.methods.index(name) for name in table.baselines]
    baseline_scores = table.scores[rows]
    mu = baseline_scores.mean(axis=0)
    sigma = baseline_scores.std(axis=0)
    for task, value in zip(table.tasks, sigma):
        if value == 0:
            raise ZeroVarianceError(task)
    z = (table.scores - mu) / sigma
    return ZScoreResult(
        tasks=tuple(table.tasks),
        methods=tuple(table.methods),
        mu=tuple(float(v) for v in mu),
        sigma=tuple(float(v) for v in sigma),
        z=tuple(tuple(float(v) for v in row) for row in z),
        avgz=tuple(float(v) for v in z.mean(axis=1)),
    )


def load_metric_table(path, baselines=()):
    """CSV with a ``method`` column followed by one column per task."""
    with open(path, newline='', encoding='utf-8') as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or len(header) < 2:
            raise AnalysisError(f"{path} needs a header row: method,<task>,...")
        methods, scores = [], []
        for line_number, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise AnalysisError(f"{path}:{line_number} has {len(row)} columns, expected {len(header)}")
            try:
                scores.append([float(value) for value in row[1:]])
            except ValueError as exc:
                raise AnalysisError(f"{path}:{line_number}: {exc}") from exc
            methods.append(row[0])
    return MetricTable(tasks=tuple(header[1:]), methods=tuple(methods), scores=np.array(scores), baselines=tuple(baselines))
