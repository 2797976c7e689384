"""
Three-task worked-example fixture.

Two tensors, five elements. ``dense.weight`` starts from zero so the task
checkpoints hold the task vectors themselves; ``dense.bias`` exercises the
negative-majority branch. The ``*.safetensors`` files in this directory hold
the same tensors :func:`materialize` writes.
"""
from pathlib import Path

import numpy as np
from django.conf import settings

from ..tensor_store import DType, TensorSpec, write_checkpoint

DELTA = 1.5
BETA = 1.0

BASE = {
    'dense.weight': [0.0, 0.0, 0.0],
    'dense.bias': [1.0, -1.0],
}

TASK_VECTORS = [
    {'dense.weight': [0.2, -0.1, 0.3], 'dense.bias': [0.5, 0.5]},
    {'dense.weight': [0.4, 0.1, -0.2], 'dense.bias': [-0.25, -0.25]},
    {'dense.weight': [-0.1, 0.2, 0.5], 'dense.bias': [0.25, -0.5]},
]

# full mode, beta 1, delta 1.5; active sets {1,2}, {2,3}, {1,3} and {1,3}, {2,3}
EXPECTED_FULL = {
    'dense.weight': [0.30998, 0.15250, 0.40997],
    'dense.bias': [1.390544, -1.390544],
}

FILE_NAMES = ('base.safetensors', 'task1.safetensors', 'task2.safetensors', 'task3.safetensors')


def base_tensors():
    return {name: np.array(values, dtype=np.float32) for name, values in BASE.items()}


def task_tensors():
    """Task checkpoints as float32 arrays: base + tau, rounded to float32."""
    base = base_tensors()
    return [
        {name: base[name] + np.array(tau[name], dtype=np.float32) for name in BASE}
        for tau in TASK_VECTORS
    ]


def _specs(tensors):
    return [(name, TensorSpec(DType.F32, values.shape, values)) for name, values in tensors.items()]


def materialize(directory):
    """Write the fixture to ``directory``; returns (base path, [task paths])."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = [directory / name for name in FILE_NAMES]
    write_checkpoint(paths[0], _specs(base_tensors()))
    for path, tensors in zip(paths[1:], task_tensors()):
        write_checkpoint(path, _specs(tensors))
    return paths[0], paths[1:]


def bundled_paths():
    """The fixture files shipped with the package."""
    directory = Path(settings.AGENTDICE_FIXTURE_DIR)
    return directory / FILE_NAMES[0], [directory / name for name in FILE_NAMES[1:]]
