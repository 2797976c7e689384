"""
Error hierarchy for the toolkit.

Every family carries the process exit code the management commands map it to:
1 usage/config, 2 data/validation, 3 I/O (``OSError`` is never wrapped).
"""

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_IO = 3


class DiceError(Exception):
    exit_code = EXIT_DATA


class ConfigError(DiceError, ValueError):
    """Invalid parameter value (δ, β, ε, p, K, M, r, ...)."""

    exit_code = EXIT_USAGE


# ============================================
# TENSOR STORE
# ============================================

class TensorStoreError(DiceError):
    pass


class HeaderError(TensorStoreError):
    def __init__(self, path, detail):
        super().__init__(f"malformed header in {path}: {detail}")


class OffsetOutOfBounds(TensorStoreError):
    def __init__(self, path, name, end, limit):
        super().__init__(
            f"offset out of bounds in {path}: tensor {name!r} ends at byte {end}, "
            f"data region holds {limit}"
        )


class UnsupportedDtype(TensorStoreError):
    def __init__(self, name, dtype):
        super().__init__(f"unsupported dtype {dtype!r} for tensor {name!r} (expected F32, F16 or BF16)")


class DuplicateTensorName(TensorStoreError):
    def __init__(self, name):
        super().__init__(f"duplicate tensor name {name!r}")


class UnknownTensorName(TensorStoreError, KeyError):
    def __init__(self, name):
        super().__init__(f"unknown tensor name {name!r}")

    def __str__(self):
        return self.args[0]


class ShapeMismatch(TensorStoreError):
    def __init__(self, name, length, shape):
        super().__init__(f"length/shape mismatch for {name!r}: {length} values for shape {list(shape)}")


# ============================================
# FUSION
# ============================================

class FusionError(DiceError):
    pass


class AlignmentError(FusionError):
    pass


class NoCommonTensors(FusionError):
    def __init__(self):
        super().__init__("no common tensors between the base and every task checkpoint")


class DtypeConflict(FusionError):
    pass


class MissingTensor(FusionError):
    pass


# ============================================
# PARTITION / ANALYSIS
# ============================================

class PartitionError(DiceError):
    pass


class EmptyTrainingSplit(PartitionError):
    def __init__(self, size, ratio):
        super().__init__(f"empty training split: floor({ratio} * {size}) = 0")


class MissingToolsField(PartitionError):
    def __init__(self, record_id, field):
        super().__init__(f"record {record_id!r} has no tools field {field!r}")


class AnalysisError(DiceError):
    pass


class ZeroVarianceError(AnalysisError):
    def __init__(self, task):
        super().__init__(f"zero variance in baseline scores for task {task!r}")
        self.task = task
