"""
Whole-checkpoint merging.

Streams every tensor of the base checkpoint through :func:`dice.fusion.fuse_block`
block by block, reading the matching block of each task checkpoint, and writes
the result at pre-computed offsets. Tensors are independent jobs on a thread
pool; the output bytes do not depend on the worker count or block size.
"""
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from django.conf import settings

from .exceptions import AlignmentError, ConfigError, DtypeConflict, MissingTensor, NoCommonTensors
from .fusion import ConsensusReport, ConsensusStats, fuse_block
from .tensor_store import Checkpoint, CheckpointWriter, check_compatibility, open_checkpoint

logger = logging.getLogger(__name__)

FUSE = 'fuse'
COPY = 'copy'


@dataclass
class PhaseTimings:
    """Overhead accounting; compute/write are summed over workers."""

    header_seconds: float = 0.0
    compute_seconds: float = 0.0
    write_seconds: float = 0.0
    wall_seconds: float = 0.0
    tensors: int = 0
    fused_tensors: int = 0
    bytes_read: int = 0
    bytes_written: int = 0
    threads: int = 1

    @property
    def throughput_mb_s(self):
        return self.bytes_read / self.wall_seconds / 1e6 if self.wall_seconds > 0 else 0.0


@dataclass(frozen=True)
class _Job:
    name: str
    action: str
    numel: int


@dataclass
class _JobResult:
    name: str
    stats: ConsensusStats | None = None
    compute_seconds: float = 0.0
    write_seconds: float = 0.0
    bytes_read: int = 0
    bytes_written: int = 0


def plan_merge(base, tasks, cfg):
    """Decide per base tensor whether it is fused or copied through."""
    profile = check_compatibility(base, tasks)
    if not profile.common:
        raise NoCommonTensors()

    jobs = []
    for meta in base.header:
        name = meta.name
        if not cfg.tensor_filter.matches(name):
            logger.debug(f"Tensor {name} excluded by filter; copied from base")
            jobs.append(_Job(name, COPY, meta.numel))
        elif name in profile.specs:
            jobs.append(_Job(name, FUSE, meta.numel))
        elif name in profile.shape_conflicts:
            raise AlignmentError(f"tensor {name!r} has different shapes across checkpoints")
        elif name in profile.dtype_conflicts:
            raise DtypeConflict(f"tensor {name!r} has different dtypes across checkpoints")
        elif cfg.missing_tensors == 'error':
            raise MissingTensor(f"tensor {name!r} is missing from at least one task checkpoint")
        else:
            logger.warning(f"Tensor {name} missing from some task checkpoint; copied from base")
            jobs.append(_Job(name, COPY, meta.numel))

    task_only = [name for name in profile.partial if name not in base]
    if task_only:
        logger.warning(f"Ignoring {len(task_only)} tensors absent from the base: {', '.join(task_only[:5])}")
    return jobs


def _run_job(job, base, tasks, cfg, writer, chunk_elements):
    result = _JobResult(job.name)
    if job.action == COPY:
        started = time.perf_counter()
        raw = base.read_raw(job.name)
        result.bytes_read = len(raw)
        result.bytes_written = writer.write_raw(job.name, raw)
        result.write_seconds = time.perf_counter() - started
        return result

    stats = ConsensusStats(k=len(tasks))
    for start in range(0, job.numel, chunk_elements):
        stop = min(job.numel, start + chunk_elements)
        started = time.perf_counter()
        base_block = base.read_block_f32(job.name, start, stop)
        taus = np.empty((len(tasks), stop - start), dtype=np.float32)
        for row, ckpt in enumerate(tasks):
            np.subtract(ckpt.read_block_f32(job.name, start, stop), base_block, out=taus[row])
        fused, block_stats = fuse_block(base_block, taus, cfg)
        stats = stats + block_stats
        written = time.perf_counter()
        result.bytes_written += writer.write_block(job.name, start, fused)
        result.compute_seconds += written - started
        result.write_seconds += time.perf_counter() - written
        result.bytes_read += base.meta(job.name).dtype.width * (stop - start) * (len(tasks) + 1)
    result.stats = stats
    return result


def merge_checkpoints(base, tasks, cfg, out, threads=None, chunk_elements=None):
    """
    Fuse ``tasks`` into ``base`` and write the result to ``out``.

    ``base`` and ``tasks`` may be open :class:`Checkpoint` handles or paths.
    Output tensors keep the base checkpoint's order, shapes and dtypes.

    :return: ConsensusReport with per-tensor statistics and phase timings
    """
    threads = settings.AGENTDICE_THREADS if threads is None else threads
    chunk_elements = settings.AGENTDICE_CHUNK_ELEMENTS if chunk_elements is None else chunk_elements
    if threads < 1 or chunk_elements < 1:
        raise ConfigError(f"threads and chunk size must be >= 1, got {threads} and {chunk_elements}")
    timings = PhaseTimings(threads=threads)
    wall_started = time.perf_counter()

    opened = []

    def _open(item):
        if isinstance(item, Checkpoint):
            return item
        ckpt = open_checkpoint(item)
        opened.append(ckpt)
        return ckpt

    try:
        started = time.perf_counter()
        base = _open(base)
        tasks = [_open(task) for task in tasks]
        jobs = plan_merge(base, tasks, cfg)
        timings.header_seconds = time.perf_counter() - started

        k = len(tasks)
        delta = cfg.resolve_delta(k)
        metadata = dict(base.metadata)
        metadata.update({
            'agentdice.mode': cfg.mode.value,
            'agentdice.beta': repr(cfg.beta),
            'agentdice.delta': repr(delta),
            'agentdice.tasks': str(k),
        })
        layout = [(meta.name, meta.dtype, meta.shape) for meta in base.header]
        logger.info(f"Merging {k} task checkpoints into {Path(out).name} "
                    f"({sum(j.action == FUSE for j in jobs)} fused, {sum(j.action == COPY for j in jobs)} copied, "
                    f"mode={cfg.mode.value}, threads={threads})")

        with CheckpointWriter(out, layout, metadata) as writer:
            with ThreadPoolExecutor(max_workers=threads) as executor:
                # map() yields in job order, so the report sums in a fixed order
                results = list(executor.map(
                    lambda job: _run_job(job, base, tasks, cfg, writer, chunk_elements), jobs
                ))
            started = time.perf_counter()
        timings.write_seconds += time.perf_counter() - started
    finally:
        for ckpt in opened:
            ckpt.close()

    totals = ConsensusStats(k=k)
    per_tensor = {}
    passthrough = []
    for result in results:
        timings.compute_seconds += result.compute_seconds
        timings.write_seconds += result.write_seconds
        timings.bytes_read += result.bytes_read
        timings.bytes_written += result.bytes_written
        if result.stats is None:
            passthrough.append(result.name)
            continue
        per_tensor[result.name] = result.stats
        totals = totals + result.stats
    timings.tensors = len(results)
    timings.fused_tensors = len(per_tensor)
    timings.wall_seconds = time.perf_counter() - wall_started

    logger.info(f"Merged {timings.fused_tensors} tensors ({totals.elements} elements) in "
                f"{timings.wall_seconds:.2f}s: header {timings.header_seconds:.3f}s, "
                f"compute {timings.compute_seconds:.3f}s, write {timings.write_seconds:.3f}s")
    return ConsensusReport(
        mode=cfg.mode,
        k=k,
        delta=delta,
        beta=cfg.beta,
        zero_sign_policy=cfg.zero_sign_policy,
        epsilon=cfg.epsilon,
        totals=totals,
        per_tensor=per_tensor,
        passthrough=tuple(passthrough),
        timings=timings,
    )
