"""
Single-file tensor container
============================

Checkpoints are stored in the community "safetensors" format, so real
fine-tuned checkpoints can be merged directly::

    <u64 little-endian header length N><N bytes of JSON header><data region>

Validation and F32/F16 decoding go through the ``safetensors`` package. Two
things stay hand-written: bfloat16 widening/narrowing (numpy has no bfloat16
dtype) and :class:`CheckpointWriter`, which fills a pre-sized file block by
block at fixed offsets so fusion never holds a whole fused tensor in memory.

Reads are lazy: a :class:`Checkpoint` decodes one tensor (or one block of a
tensor) at a time. Decoding always widens to float32.
"""
import json
import logging
import math
import os
import struct
import tempfile
from collections.abc import Mapping
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import NamedTuple

import numpy as np
from safetensors import SafetensorError, safe_open
from safetensors.numpy import save_file

from .exceptions import (
    ConfigError,
    DuplicateTensorName,
    HeaderError,
    OffsetOutOfBounds,
    ShapeMismatch,
    UnknownTensorName,
    UnsupportedDtype,
)

logger = logging.getLogger(__name__)

HEADER_PREFIX = struct.Struct('<Q')
METADATA_KEY = '__metadata__'
HEADER_ALIGNMENT = 8
NUMPY_DTYPES = {'F32': np.float32, 'F16': np.float16}


class DType(str, Enum):
    F32 = 'F32'
    F16 = 'F16'
    BF16 = 'BF16'

    @property
    def width(self):
        return 4 if self is DType.F32 else 2

    @classmethod
    def parse(cls, value, name='?'):
        try:
            return cls(value)
        except ValueError:
            raise UnsupportedDtype(name, value) from None


def widen(raw, dtype):
    """Decode little-endian bytes of ``dtype`` into a new float32 array (exact)."""
    if isinstance(raw, (bytes, bytearray, memoryview)):
        raw = np.frombuffer(raw, dtype=np.uint8)
    raw = np.asarray(raw, dtype=np.uint8)
    if dtype is DType.F32:
        return raw.view('<f4').astype(np.float32, copy=True)
    if dtype is DType.F16:
        return raw.view('<f2').astype(np.float32)
    # bfloat16 is the top half of a float32
    return (raw.view('<u2').astype(np.uint32) << 16).view(np.float32)


def narrow(values, dtype):
    """Encode float32 values as little-endian ``dtype`` bytes, rounding to nearest even."""
    values = np.ascontiguousarray(values, dtype=np.float32)
    if dtype is DType.F32:
        return values.astype('<f4', copy=False).tobytes()
    if dtype is DType.F16:
        return values.astype('<f2').tobytes()
    bits = values.view(np.uint32)
    rounded = (bits + np.uint32(0x7FFF) + ((bits >> 16) & np.uint32(1))) >> 16
    nan = np.isnan(values)
    if nan.any():
        # keep NaN a quiet NaN instead of letting the carry turn it into inf
        rounded[nan] = (bits[nan] >> 16) | np.uint32(0x0040)
    return rounded.astype('<u2').tobytes()


@dataclass(frozen=True)
class TensorMeta:
    name: str
    dtype: DType
    shape: tuple
    byte_range: tuple

    @property
    def numel(self):
        return math.prod(self.shape)

    @property
    def nbytes(self):
        return self.byte_range[1] - self.byte_range[0]


class TensorSpec(NamedTuple):
    """One tensor to write: storage dtype, shape and float32 values."""

    dtype: DType
    shape: tuple
    data: object


# ============================================
# READING
# ============================================

def _covering_slices(shape, start, stop):
    """
    Slices over ``shape`` whose row-major result covers flat elements ``[start, stop)``.

    Descends while the range stays inside one index of the current axis, so at
    most two partial rows of the deepest sliced axis are over-read.

    :return: (tuple of slices, offset of ``start`` inside the sliced block)
    """
    axis, span = 0, math.prod(shape)
    while axis < len(shape) - 1:
        inner = span // shape[axis]
        if start // inner != (stop - 1) // inner:
            break
        span, axis = inner, axis + 1
    row = span // shape[axis]
    prefix = np.unravel_index(start // span, shape[:axis]) if axis else ()
    local = start % span
    first, last = local // row, -(-(local + stop - start) // row)
    index = tuple(slice(int(i), int(i) + 1) for i in prefix) + (slice(first, last),)
    return index, local - first * row


class Checkpoint:
    """
    Read handle over one container; per-tensor reads are thread-safe.

    F32/F16 tensors are decoded by ``safetensors``; bfloat16 tensors and raw
    pass-through bytes come from a memory map of the data region.
    """

    def __init__(self, path, header, metadata, reader, data_start, data_length):
        self.path = Path(path)
        self.header = tuple(header)
        self.metadata = dict(metadata)
        self.data_start = data_start
        self.data_length = data_length
        self._reader = reader
        self._index = {meta.name: meta for meta in self.header}
        if data_length:
            self._data = np.memmap(self.path, dtype=np.uint8, mode='r', offset=data_start, shape=(data_length,))
        else:
            self._data = np.empty(0, dtype=np.uint8)

    def __repr__(self):
        return f"<Checkpoint {self.path.name}: {len(self.header)} tensors>"

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()

    def __contains__(self, name):
        return name in self._index

    def __len__(self):
        return len(self.header)

    @property
    def names(self):
        return [meta.name for meta in self.header]

    def meta(self, name):
        try:
            return self._index[name]
        except KeyError:
            raise UnknownTensorName(name) from None

    def read_raw(self, name):
        start, end = self.meta(name).byte_range
        return self._data[start:end]

    def read_tensor_f32(self, name):
        meta = self.meta(name)
        if meta.dtype is DType.BF16:
            return widen(self.read_raw(name), meta.dtype), meta.shape
        return self._reader.get_tensor(name).astype(np.float32).ravel(), meta.shape

    def read_block_f32(self, name, start, stop):
        """Elements ``[start, stop)`` of the flattened tensor, widened to float32."""
        meta = self.meta(name)
        if not 0 <= start <= stop <= meta.numel:
            raise ShapeMismatch(name, stop - start, meta.shape)
        if meta.dtype is DType.BF16:
            base = meta.byte_range[0]
            width = meta.dtype.width
            return widen(self._data[base + start * width:base + stop * width], meta.dtype)
        if start == stop:
            return np.empty(0, dtype=np.float32)
        if not meta.shape:
            return self._reader.get_tensor(name).astype(np.float32).ravel()
        index, offset = _covering_slices(meta.shape, start, stop)
        block = self._reader.get_slice(name)[index].astype(np.float32).ravel()
        return block[offset:offset + stop - start]

    def close(self):
        self._reader = None
        self._data = np.empty(0, dtype=np.uint8)


def _reject_duplicates(pairs):
    document = {}
    for key, value in pairs:
        if key in document:
            raise DuplicateTensorName(key)
        document[key] = value
    return document


def _parse_entry(path, name, entry, data_length):
    if not isinstance(entry, dict) or not {'dtype', 'shape', 'data_offsets'} <= entry.keys():
        raise HeaderError(path, f"entry {name!r} needs dtype, shape and data_offsets")
    dtype = DType.parse(entry['dtype'], name)
    shape = entry['shape']
    if not isinstance(shape, list) or not all(type(dim) is int and dim >= 0 for dim in shape):
        raise HeaderError(path, f"tensor {name!r} has invalid shape {shape!r}")
    offsets = entry['data_offsets']
    if (not isinstance(offsets, list) or len(offsets) != 2
            or not all(type(o) is int for o in offsets) or not 0 <= offsets[0] <= offsets[1]):
        raise HeaderError(path, f"tensor {name!r} has invalid data_offsets {offsets!r}")
    if offsets[1] > data_length:
        raise OffsetOutOfBounds(path, name, offsets[1], data_length)
    return TensorMeta(name=name, dtype=dtype, shape=tuple(shape), byte_range=tuple(offsets))


def open_checkpoint(path):
    """
    Open ``path`` for lazy reads; tensor data stays on disk.

    The header is scanned once by hand for what ``safetensors`` does not expose
    (file order, duplicate names, dtype and offset errors, bfloat16 offsets),
    then handed to :func:`safetensors.safe_open`, which checks that the data
    region is tiled exactly and that every byte range fits its shape.
    """
    path = Path(path)
    size = path.stat().st_size
    with open(path, 'rb') as fh:
        prefix = fh.read(HEADER_PREFIX.size)
        if len(prefix) < HEADER_PREFIX.size:
            raise HeaderError(path, "file is shorter than the 8-byte length prefix")
        (header_length,) = HEADER_PREFIX.unpack(prefix)
        if header_length > size - HEADER_PREFIX.size:
            raise HeaderError(path, f"header length {header_length} exceeds file size {size}")
        raw_header = fh.read(header_length)
    try:
        document = json.loads(raw_header.decode('utf-8'), object_pairs_hook=_reject_duplicates)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(path, str(exc)) from exc
    if not isinstance(document, dict):
        raise HeaderError(path, "header is not a JSON object")

    data_start = HEADER_PREFIX.size + header_length
    data_length = size - data_start
    document.pop(METADATA_KEY, None)
    header = [_parse_entry(path, name, entry, data_length) for name, entry in document.items()]

    try:
        reader = safe_open(str(path), framework='numpy')
        metadata = reader.metadata() or {}
    except SafetensorError as exc:
        raise HeaderError(path, str(exc)) from exc

    logger.debug(f"Opened {path} with {len(header)} tensors ({data_length} data bytes)")
    return Checkpoint(path, header, metadata, reader, data_start, data_length)


def read_tensor_f32(ckpt, name):
    """Flat float32 values and shape of tensor ``name``."""
    return ckpt.read_tensor_f32(name)


# ============================================
# WRITING
# ============================================

def build_header(layout, metadata=None):
    """
    Lay tensors out back to back in ``layout`` order.

    :param layout: iterable of ``(name, dtype, shape)``
    :return: (encoded header bytes including the length prefix, list of TensorMeta)
    """
    metas = []
    cursor = 0
    seen = set()
    for name, dtype, shape in layout:
        if name in seen:
            raise DuplicateTensorName(name)
        if name == METADATA_KEY:
            raise ConfigError(f"{METADATA_KEY} is reserved and cannot name a tensor")
        seen.add(name)
        dtype = DType.parse(dtype, name)
        shape = tuple(int(dim) for dim in shape)
        if any(dim < 0 for dim in shape):
            raise ShapeMismatch(name, 0, shape)
        nbytes = math.prod(shape) * dtype.width
        metas.append(TensorMeta(name=name, dtype=dtype, shape=shape, byte_range=(cursor, cursor + nbytes)))
        cursor += nbytes

    document = {}
    if metadata:
        document[METADATA_KEY] = {str(k): str(v) for k, v in metadata.items()}
    for meta in metas:
        document[meta.name] = {
            'dtype': meta.dtype.value,
            'shape': list(meta.shape),
            'data_offsets': list(meta.byte_range),
        }
    encoded = json.dumps(document, separators=(',', ':')).encode('utf-8')
    encoded += b' ' * (-len(encoded) % HEADER_ALIGNMENT)
    return HEADER_PREFIX.pack(len(encoded)) + encoded, metas


class CheckpointWriter:
    """
    Writes a container whose layout is fixed up front.

    Tensors (or blocks of them) may be written in any order and from several
    threads, because every write lands at a pre-computed, disjoint offset. The
    file is assembled under a temporary name and moved into place on commit.
    """

    def __init__(self, path, layout, metadata=None):
        self.path = Path(path)
        prefix, metas = build_header(layout, metadata)
        self.metas = {meta.name: meta for meta in metas}
        self.data_start = len(prefix)
        self.data_length = metas[-1].byte_range[1] if metas else 0
        self.bytes_written = 0

        self.path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(prefix=f'.{self.path.name}.', suffix='.partial', dir=self.path.parent)
        self._tmp_path = Path(tmp_name)
        self._fd = fd
        try:
            os.fchmod(fd, 0o644)
            os.pwrite(fd, prefix, 0)
            os.ftruncate(fd, self.data_start + self.data_length)
        except OSError:
            self.abort()
            raise

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.commit()
        else:
            self.abort()

    def _meta(self, name):
        try:
            return self.metas[name]
        except KeyError:
            raise UnknownTensorName(name) from None

    def write_block(self, name, start, values):
        """Encode float32 ``values`` into elements ``[start, start+len)`` of ``name``."""
        meta = self._meta(name)
        values = np.asarray(values, dtype=np.float32).ravel()
        if start < 0 or start + values.size > meta.numel:
            raise ShapeMismatch(name, start + values.size, meta.shape)
        return self._pwrite(meta.byte_range[0] + start * meta.dtype.width, narrow(values, meta.dtype))

    def write_tensor(self, name, values):
        meta = self._meta(name)
        values = np.asarray(values, dtype=np.float32).ravel()
        if values.size != meta.numel:
            raise ShapeMismatch(name, values.size, meta.shape)
        return self.write_block(name, 0, values)

    def write_raw(self, name, raw):
        """Copy already-encoded bytes verbatim (pass-through tensors)."""
        meta = self._meta(name)
        raw = bytes(raw)
        if len(raw) != meta.nbytes:
            raise ShapeMismatch(name, len(raw) // meta.dtype.width, meta.shape)
        return self._pwrite(meta.byte_range[0], raw)

    def _pwrite(self, offset, payload):
        if payload:
            os.pwrite(self._fd, payload, self.data_start + offset)
        self.bytes_written += len(payload)
        return len(payload)

    def commit(self):
        os.fsync(self._fd)
        os.close(self._fd)
        self._fd = None
        os.replace(self._tmp_path, self.path)
        logger.debug(f"Wrote {self.path} ({len(self.metas)} tensors, {self.data_length} data bytes)")

    def abort(self):
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None
        self._tmp_path.unlink(missing_ok=True)


def write_checkpoint(path, tensors, metadata=None):
    """
    Write a complete container.

    F32/F16 maps go through :func:`safetensors.numpy.save_file`; any bfloat16
    tensor routes the whole map through :class:`CheckpointWriter`.

    :param tensors: mapping (or ordered pairs) name -> TensorSpec / (dtype, shape, f32 data)
    """
    items = list(tensors.items()) if isinstance(tensors, Mapping) else list(tensors)
    arrays = []
    seen = set()
    for name, spec in items:
        dtype, shape, data = spec
        if name in seen:
            raise DuplicateTensorName(name)
        if name == METADATA_KEY:
            raise ConfigError(f"{METADATA_KEY} is reserved and cannot name a tensor")
        seen.add(name)
        dtype = DType.parse(dtype, name)
        shape = tuple(int(dim) for dim in shape)
        values = np.asarray(data, dtype=np.float32).ravel()
        if any(dim < 0 for dim in shape) or values.size != math.prod(shape):
            raise ShapeMismatch(name, values.size, shape)
        arrays.append((name, dtype, shape, values))

    if any(dtype is DType.BF16 for _, dtype, _, _ in arrays):
        with CheckpointWriter(path, [(name, dtype, shape) for name, dtype, shape, _ in arrays], metadata) as writer:
            for name, _, _, values in arrays:
                writer.write_tensor(name, values)
        return

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f'.{path.name}.', suffix='.partial', dir=path.parent)
    os.close(fd)
    try:
        save_file(
            {name: values.astype(NUMPY_DTYPES[dtype.value]).reshape(shape) for name, dtype, shape, values in arrays},
            tmp_name,
            metadata={str(k): str(v) for k, v in metadata.items()} if metadata else None,
        )
        os.chmod(tmp_name, 0o644)
        os.replace(tmp_name, path)
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise
    logger.debug(f"Wrote {path} ({len(arrays)} tensors)")


# ============================================
# COMPATIBILITY
# ============================================

@dataclass(frozen=True)
class CompatibilityProfile:
    common: tuple = ()
    specs: dict = field(default_factory=dict)
    partial: tuple = ()
    shape_conflicts: tuple = ()
    dtype_conflicts: tuple = ()

    @property
    def is_clean(self):
        return not (self.partial or self.shape_conflicts or self.dtype_conflicts)

    def as_dict(self):
        return {
            'common': list(self.common),
            'partial': list(self.partial),
            'shape_conflicts': list(self.shape_conflicts),
            'dtype_conflicts': list(self.dtype_conflicts),
        }


def check_compatibility(base, tasks):
    """Report which tensors can be fused element-wise; mismatches are reported, not raised."""
    tasks = list(tasks)
    if not tasks:
        raise ConfigError("at least one task checkpoint is required")
    checkpoints = [base, *tasks]

    names = list(base.names)
    seen = set(names)
    for ckpt in tasks:
        for name in ckpt.names:
            if name not in seen:
                seen.add(name)
                names.append(name)

    common, partial, shape_conflicts, dtype_conflicts = [], [], [], []
    specs = {}
    for name in names:
        metas = [ckpt.meta(name) for ckpt in checkpoints if name in ckpt]
        if len(metas) < len(checkpoints):
            partial.append(name)
        elif len({meta.shape for meta in metas}) > 1:
            shape_conflicts.append(name)
        elif len({meta.dtype for meta in metas}) > 1:
            dtype_conflicts.append(name)
        else:
            common.append(name)
            specs[name] = (metas[0].dtype, metas[0].shape)

    return CompatibilityProfile(
        common=tuple(common),
        specs=specs,
        partial=tuple(partial),
        shape_conflicts=tuple(shape_conflicts),
        dtype_conflicts=tuple(dtype_conflicts),
    )
