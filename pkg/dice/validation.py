"""
Offline self-validation battery run by ``manage.py validate``.

Every check returns a :class:`CheckResult`; none of them needs network access
or data beyond the fixture bundled in ``dice/fixtures``.
"""
import logging
import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fixtures
from .fusion import FusionConfig, FusionMode, ZeroSignPolicy, consensus_filter, fuse_block, importance_weights
from .merge import merge_checkpoints
from .simulation import MagnitudeDist, SimConfig, exact_majority_error, hoeffding_bound, simulate
from .tensor_store import DType, TensorSpec, narrow, open_checkpoint, widen, write_checkpoint

logger = logging.getLogger(__name__)

ORACLE_RTOL = 1e-6
WORKED_EXAMPLE_ATOL = 1e-4
CONFORMANCE_KS = (1, 3, 5, 9, 15)
CONFORMANCE_PS = (0.6, 0.7, 0.9)
CONFORMANCE_TRIALS = 20_000
# 15 simultaneous comparisons, so a wider band than the usual 1.96
CONFORMANCE_Z = 3.0
# heavy-tailed magnitudes: filtering must beat averaging by more than both 95% bands
GAP_KS = (5, 9, 15)
GAP_PS = (0.6, 0.7)
GAP_TRIALS = 200_000


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


# ============================================
# DENSE ORACLE
# ============================================

def dense_oracle(base, taus, cfg):
    """
    Element-by-element float64 reference of the fusion rule.

    Written without vectorisation or sorting so it shares no code path with
    :func:`dice.fusion.fuse_block`.
    """
    base = [float(v) for v in np.asarray(base).ravel()]
    taus = [[float(v) for v in row] for row in np.asarray(taus)]
    k = len(taus)
    delta = k / 2 if cfg.delta is None else cfg.delta
    fused = []
    for i, base_value in enumerate(base):
        column = [taus[j][i] for j in range(k)]
        if cfg.abstains:
            voters = [j for j in range(k) if abs(column[j]) >= cfg.epsilon]
        else:
            voters = list(range(k))
        threshold = delta * len(voters) / k
        positive = [j for j in voters if column[j] >= 0]
        negative = [j for j in voters if column[j] < 0]
        if len(positive) > threshold:
            active = positive
        elif len(positive) < len(voters) - threshold:
            active = negative
        else:
            active = list(range(k))
        if not active:
            active = list(range(k))

        if cfg.mode is FusionMode.FULL:
            scores = {j: math.exp(cfg.beta * abs(column[j])) for j in active}
            total = sum(scores.values())
            update = sum(scores[j] / total * column[j] for j in active)
        elif cfg.mode is FusionMode.NO_WEIGHT:
            update = sum(column[j] for j in active)
        else:
            update = sum(column) / k
        fused.append(base_value + update)
    return np.array(fused)


def _oracle_scale(base, taus):
    return np.abs(base.astype(np.float64)) + np.abs(taus.astype(np.float64)).sum(axis=0)


def _random_config(rng, mode, k):
    delta = None if rng.random() < 0.5 else float(rng.integers(0, 2 * k + 1)) / 2
    if rng.random() < 0.25:
        # powers of two keep the float32 and float64 threshold comparisons identical
        return FusionConfig(mode=mode, delta=delta, beta=float(rng.uniform(0.1, 10.0)),
                            zero_sign_policy=ZeroSignPolicy.EPSILON_ABSTAIN,
                            epsilon=float(2.0 ** -rng.integers(2, 8)))
    return FusionConfig(mode=mode, delta=delta, beta=float(rng.uniform(0.1, 10.0)))


def _random_instance(rng):
    k = int(rng.integers(2, 6))
    n = int(rng.integers(1, 65))
    base = rng.normal(0.0, 1.0, n).astype(np.float32)
    taus = rng.normal(0.0, 0.1, (k, n)).astype(np.float32)
    # exact zeros and ties exercise the tie-break and branch edges
    taus[rng.random((k, n)) < 0.05] = 0.0
    return base, taus


# ============================================
# CHECKS
# ============================================

def check_oracle_equivalence(seed=0, instances=1000, inject_fault=False):
    rng = np.random.default_rng(seed)
    failures = []
    modes = list(FusionMode)
    for index in range(instances):
        base, taus = _random_instance(rng)
        mode = modes[index % len(modes)]
        cfg = _random_config(rng, mode, taus.shape[0])
        fused, _ = fuse_block(base, taus, cfg, invert_active_set=inject_fault)
        expected = dense_oracle(base, taus, cfg)
        tolerance = ORACLE_RTOL * _oracle_scale(base, taus) + np.finfo(np.float32).tiny
        with np.errstate(invalid='ignore'):
            ok = np.abs(fused.astype(np.float64) - expected) <= tolerance
        if not ok.all():
            failures.append(f"instance {index} ({mode.value}, K={taus.shape[0]}, n={taus.shape[1]})")
    if failures:
        return False, f"{len(failures)}/{instances} instances disagree, first: {failures[0]}"
    return True, f"{instances} random instances match the dense oracle"


def check_worked_example():
    base_path, task_paths = fixtures.bundled_paths()
    with tempfile.TemporaryDirectory() as tmp:
        results = {}
        for mode in (FusionMode.FULL, FusionMode.AVERAGE):
            out = Path(tmp) / f'{mode.value}.safetensors'
            cfg = FusionConfig(mode=mode, delta=fixtures.DELTA, beta=fixtures.BETA)
            merge_checkpoints(base_path, task_paths, cfg, out, threads=1)
            with open_checkpoint(out) as fused:
                results[mode] = {name: fused.read_tensor_f32(name)[0] for name in fused.names}

    for name, expected in fixtures.EXPECTED_FULL.items():
        actual = results[FusionMode.FULL][name]
        if not np.allclose(actual, expected, rtol=0, atol=WORKED_EXAMPLE_ATOL):
            return False, f"{name}: got {actual.tolist()}, expected {expected}"
    if all(np.array_equal(results[FusionMode.FULL][n], results[FusionMode.AVERAGE][n]) for n in fixtures.BASE):
        return False, "full and average modes produced identical tensors"
    return True, "fixture reproduces the worked example; average mode differs"


def check_hoeffding_conformance(seed=0, magnitudes=None):
    magnitudes = magnitudes or MagnitudeDist('lognormal')
    problems = []
    for p in CONFORMANCE_PS:
        for k in CONFORMANCE_KS:
            exact = exact_majority_error(k, p)
            bound = hoeffding_bound(k, p)
            if exact > bound:
                problems.append(f"exact {exact:.5f} > bound {bound:.5f} at p={p} K={k}")
            strict = p in GAP_PS and k in GAP_KS
            trials = GAP_TRIALS if strict else CONFORMANCE_TRIALS
            result = simulate(SimConfig(p=p, k=k, trials=trials, seed=seed,
                                        magnitudes=magnitudes))
            if not result.agrees_with_exact(CONFORMANCE_Z):
                problems.append(f"Monte Carlo {result.filtered_err:.5f} vs exact {exact:.5f} at p={p} K={k}")
            if strict:
                band = result.half_width + result.avg_half_width
                if result.averaging_gap <= band:
                    problems.append(f"averaging gap {result.averaging_gap:.5f} within band {band:.5f} at p={p} K={k}")
            else:
                slack = CONFORMANCE_Z * math.sqrt(exact * (1 - exact) / trials) + 1.0 / trials
                if result.averaging_gap < -slack:
                    problems.append(f"averaging beat filtering by {-result.averaging_gap:.5f} at p={p} K={k}")
    if problems:
        return False, '; '.join(problems[:3])
    grid = len(CONFORMANCE_PS) * len(CONFORMANCE_KS)
    return True, (f"{grid} (p, K) points: exact <= Hoeffding, Monte Carlo within band, averaging no better; "
                  f"averaging strictly worse at K in {GAP_KS}, p in {GAP_PS}")


def check_roundtrip_io(seed=0):
    rng = np.random.default_rng(seed)
    values = rng.normal(0.0, 2.0, 257).astype(np.float32)
    values[:4] = [0.0, -0.0, 1.0, -65504.0]
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / 'roundtrip.safetensors'
        tensors = [(f't.{dtype.value.lower()}', TensorSpec(dtype, (1, values.size), values)) for dtype in DType]
        write_checkpoint(path, tensors, metadata={'format': 'pt'})
        with open_checkpoint(path) as ckpt:
            if ckpt.metadata != {'format': 'pt'}:
                return False, f"metadata came back as {ckpt.metadata}"
            for name, (dtype, shape, _) in tensors:
                read, read_shape = ckpt.read_tensor_f32(name)
                expected = widen(narrow(values, dtype), dtype)
                if tuple(read_shape) != shape:
                    return False, f"{name}: shape {read_shape} != {shape}"
                if read.tobytes() != expected.tobytes():
                    return False, f"{name}: values changed on the way through the file"
                if narrow(read, dtype) != ckpt.read_raw(name).tobytes():
                    return False, f"{name}: re-encoding is not stable"
    return True, f"{len(DType)} dtypes round-trip bit-exactly, metadata preserved"


def check_invariants(seed=0, cases=200):
    rng = np.random.default_rng(seed)
    for case in range(cases):
        base, taus = _random_instance(rng)
        cfg = FusionConfig(beta=float(rng.uniform(0.1, 10.0)))
        consensus = consensus_filter(taus, cfg)
        weights = importance_weights(taus, consensus, cfg)
        if np.any(weights[~consensus.active] != 0) or np.any(weights < 0):
            return False, f"case {case}: weight outside the active set"
        if not np.allclose(weights.sum(axis=0), 1.0, rtol=0, atol=1e-6):
            return False, f"case {case}: weights do not sum to 1"

        order = rng.permutation(taus.shape[0])
        fused, _ = fuse_block(base, taus, cfg)
        permuted, _ = fuse_block(base, taus[order], cfg)
        if fused.tobytes() != permuted.tobytes():
            return False, f"case {case}: task order changed the output"

        # uniform weights over all tasks are one step along the mean gradient
        eta = np.float32(0.01)
        gradients = rng.normal(0.0, 1.0, taus.shape).astype(np.float32)
        stepped, _ = fuse_block(base, -eta * gradients, FusionConfig(mode=FusionMode.NO_FILTER))
        expected = base.astype(np.float64) - float(eta) * gradients.astype(np.float64).mean(axis=0)
        if not np.allclose(stepped, expected, rtol=0, atol=1e-6):
            return False, f"case {case}: no-filter mode is not a mean gradient step"
    return True, f"{cases} cases: weight simplex, permutation invariance, mean-gradient step"


def run_checks(seed=0, instances=1000, inject_fault=False):
    """Run every check in order; exceptions count as failures."""
    battery = [
        ('oracle_equivalence', lambda: check_oracle_equivalence(seed, instances, inject_fault)),
        ('worked_example', check_worked_example),
        ('hoeffding_conformance', lambda: check_hoeffding_conformance(seed)),
        ('roundtrip_io', lambda: check_roundtrip_io(seed)),
        ('invariants', lambda: check_invariants(seed)),
    ]
    results = []
    for name, check in battery:
        started = time.perf_counter()
        try:
            passed, detail = check()
        except Exception as exc:
            logger.exception(f"Check {name} raised")
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, passed, detail, time.perf_counter() - started))
        logger.info(f"Check {name}: {'pass' if passed else 'FAIL'} ({detail})")
    return results
