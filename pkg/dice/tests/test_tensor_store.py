import json
import struct
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_array_equal
from safetensors import safe_open
from safetensors.numpy import save_file

from dice.exceptions import (
    DuplicateTensorName,
    HeaderError,
    OffsetOutOfBounds,
    ShapeMismatch,
    UnknownTensorName,
    UnsupportedDtype,
)
from dice.tensor_store import (
    DType,
    TensorSpec,
    check_compatibility,
    narrow,
    open_checkpoint,
    read_tensor_f32,
    widen,
    write_checkpoint,
)


def raw_container(path, header_json, payload):
    """Hand-built container so malformed headers can be tested."""
    encoded = header_json.encode('utf-8')
    Path(path).write_bytes(struct.pack('<Q', len(encoded)) + encoded + payload)
    return path


def f32(*values):
    return np.array(values, dtype=np.float32)


class TensorStoreTestCase(SimpleTestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()


class OpenCheckpointTests(TensorStoreTestCase):
    def test_minimal_container(self):
        header = json.dumps({'w': {'dtype': 'F32', 'shape': [2, 2], 'data_offsets': [0, 16]}})
        path = raw_container(self.tmp / 'w.safetensors', header, f32(1, 2, 3, 4).tobytes())
        with open_checkpoint(path) as ckpt:
            self.assertEqual(len(ckpt), 1)
            self.assertEqual(ckpt.meta('w').shape, (2, 2))
            values, shape = read_tensor_f32(ckpt, 'w')
        assert_array_equal(values, f32(1, 2, 3, 4))
        self.assertEqual(shape, (2, 2))

    def test_range_beyond_file_is_rejected(self):
        header = json.dumps({'w': {'dtype': 'F32', 'shape': [8], 'data_offsets': [0, 32]}})
        path = raw_container(self.tmp / 'short.safetensors', header, bytes(16))
        with self.assertRaisesMessage(OffsetOutOfBounds, 'offset out of bounds'):
            open_checkpoint(path)

    def test_duplicate_names_are_rejected(self):
        entry = '{"dtype":"F32","shape":[1],"data_offsets":[0,4]}'
        path = raw_container(self.tmp / 'dup.safetensors', f'{{"w":{entry},"w":{entry}}}', bytes(4))
        with self.assertRaisesMessage(DuplicateTensorName, 'duplicate tensor name'):
            open_checkpoint(path)

    def test_unsupported_dtype(self):
        header = json.dumps({'ids': {'dtype': 'I64', 'shape': [1], 'data_offsets': [0, 8]}})
        path = raw_container(self.tmp / 'int.safetensors', header, bytes(8))
        with self.assertRaisesMessage(UnsupportedDtype, 'unsupported dtype'):
            open_checkpoint(path)

    def test_header_length_beyond_file(self):
        path = self.tmp / 'trunc.safetensors'
        path.write_bytes(struct.pack('<Q', 1000) + b'{}')
        with self.assertRaisesMessage(HeaderError, 'malformed header'):
            open_checkpoint(path)

    def test_header_not_json(self):
        path = raw_container(self.tmp / 'junk.safetensors', '{"w": [', b'')
        with self.assertRaises(HeaderError):
            open_checkpoint(path)

    def test_gap_in_data_region(self):
        header = json.dumps({'w': {'dtype': 'F32', 'shape': [1], 'data_offsets': [4, 8]}})
        path = raw_container(self.tmp / 'gap.safetensors', header, bytes(8))
        with self.assertRaises(HeaderError):
            open_checkpoint(path)

    def test_overlapping_ranges_are_rejected(self):
        header = json.dumps({
            'a': {'dtype': 'F32', 'shape': [1], 'data_offsets': [0, 4]},
            'b': {'dtype': 'F32', 'shape': [1], 'data_offsets': [0, 4]},
        })
        path = raw_container(self.tmp / 'overlap.safetensors', header, bytes(4))
        with self.assertRaises(HeaderError):
            open_checkpoint(path)

    def test_trailing_bytes_are_rejected(self):
        header = json.dumps({'w': {'dtype': 'F32', 'shape': [1], 'data_offsets': [0, 4]}})
        path = raw_container(self.tmp / 'trailing.safetensors', header, bytes(8))
        with self.assertRaises(HeaderError):
            open_checkpoint(path)

    def test_byte_range_must_fit_the_shape(self):
        header = json.dumps({'w': {'dtype': 'F32', 'shape': [2], 'data_offsets': [0, 4]}})
        path = raw_container(self.tmp / 'short.safetensors', header, bytes(4))
        with self.assertRaises(HeaderError):
            open_checkpoint(path)

    def test_unknown_name(self):
        path = self.tmp / 'one.safetensors'
        write_checkpoint(path, {'w': TensorSpec(DType.F32, (2,), f32(1.0, -2.0))})
        with open_checkpoint(path) as ckpt:
            with self.assertRaisesMessage(UnknownTensorName, 'unknown tensor name'):
                ckpt.read_tensor_f32('missing')


class RoundTripTests(TensorStoreTestCase):
    def test_f32_is_bit_identical(self):
        rng = np.random.default_rng(3)
        values = rng.normal(size=(3, 5)).astype(np.float32)
        values[0, 0] = -0.0
        values[0, 1] = np.float32(1e-40)  # subnormal
        path = self.tmp / 'f32.safetensors'
        write_checkpoint(path, {'w': TensorSpec(DType.F32, values.shape, values)})
        with open_checkpoint(path) as ckpt:
            read, shape = ckpt.read_tensor_f32('w')
        self.assertEqual(shape, (3, 5))
        self.assertEqual(read.tobytes(), values.ravel().tobytes())

    def test_plain_values_pass_through(self):
        path = self.tmp / 'plain.safetensors'
        write_checkpoint(path, [('w', (DType.F32, (2,), [1.0, -2.0]))])
        with open_checkpoint(path) as ckpt:
            assert_array_equal(ckpt.read_tensor_f32('w')[0], f32(1.0, -2.0))

    def test_half_precision_representable_values_are_exact(self):
        for dtype in (DType.F16, DType.BF16):
            with self.subTest(dtype=dtype):
                values = f32(1.0, -2.0, 0.5, 0.0, 3.0, -0.25)
                path = self.tmp / f'{dtype.value}.safetensors'
                write_checkpoint(path, {'w': TensorSpec(dtype, (6,), values)})
                with open_checkpoint(path) as ckpt:
                    self.assertEqual(ckpt.meta('w').nbytes, 12)
                    assert_array_equal(ckpt.read_tensor_f32('w')[0], values)

    def test_metadata_round_trip(self):
        path = self.tmp / 'meta.safetensors'
        write_checkpoint(path, {'w': TensorSpec(DType.F32, (1,), [1.0])}, metadata={'format': 'pt', 'step': 7})
        with open_checkpoint(path) as ckpt:
            self.assertEqual(ckpt.metadata, {'format': 'pt', 'step': '7'})

    def test_empty_tensor_map(self):
        path = self.tmp / 'empty.safetensors'
        write_checkpoint(path, {})
        with open_checkpoint(path) as ckpt:
            self.assertEqual(len(ckpt), 0)
            self.assertEqual(ckpt.names, [])

    def test_length_shape_mismatch(self):
        with self.assertRaisesMessage(ShapeMismatch, 'length/shape mismatch'):
            write_checkpoint(self.tmp / 'bad.safetensors', {'w': TensorSpec(DType.F32, (2, 2), [1.0, 2.0, 3.0])})
        self.assertEqual(list(self.tmp.iterdir()), [])

    def test_header_is_aligned(self):
        path = self.tmp / 'aligned.safetensors'
        write_checkpoint(path, {'abc': TensorSpec(DType.F32, (1,), [1.0])})
        (header_length,) = struct.unpack('<Q', path.read_bytes()[:8])
        self.assertEqual(header_length % 8, 0)

    def test_reads_are_repeatable_in_any_order(self):
        path = self.tmp / 'two.safetensors'
        write_checkpoint(path, {
            'a': TensorSpec(DType.BF16, (4,), f32(1, 2, 3, 4)),
            'b': TensorSpec(DType.F32, (3,), f32(5, 6, 7)),
        })
        with open_checkpoint(path) as ckpt:
            first_b = ckpt.read_tensor_f32('b')[0]
            first_a = ckpt.read_tensor_f32('a')[0]
            assert_array_equal(ckpt.read_tensor_f32('a')[0], first_a)
            assert_array_equal(ckpt.read_tensor_f32('b')[0], first_b)
            assert_array_equal(ckpt.read_block_f32('a', 1, 3), f32(2, 3))

    def test_block_reads_cross_row_boundaries(self):
        values = np.arange(24, dtype=np.float32)
        path = self.tmp / 'blocks.safetensors'
        write_checkpoint(path, {
            'cube': TensorSpec(DType.F32, (2, 3, 4), values),
            'half': TensorSpec(DType.F16, (4, 6), values),
            'wide': TensorSpec(DType.F32, (1, 24), values),
        })
        with open_checkpoint(path) as ckpt:
            for name in ('cube', 'half', 'wide'):
                for start, stop in [(0, 24), (5, 7), (3, 14), (12, 24), (4, 8), (23, 24), (7, 7)]:
                    with self.subTest(name=name, start=start, stop=stop):
                        assert_array_equal(ckpt.read_block_f32(name, start, stop), values[start:stop])
            with self.assertRaises(ShapeMismatch):
                ckpt.read_block_f32('cube', 20, 25)


class InteropTests(TensorStoreTestCase):
    def test_written_files_open_with_safetensors(self):
        path = self.tmp / 'plain.safetensors'
        weight = np.arange(6, dtype=np.float32).reshape(2, 3)
        write_checkpoint(path, {
            'weight': TensorSpec(DType.F32, (2, 3), weight),
            'scale': TensorSpec(DType.F16, (2,), f32(0.5, -1.0)),
        }, metadata={'format': 'np'})
        with safe_open(str(path), framework='numpy') as reader:
            self.assertEqual(sorted(reader.keys()), ['scale', 'weight'])
            self.assertEqual(reader.metadata(), {'format': 'np'})
            assert_array_equal(reader.get_tensor('weight'), weight)
            self.assertEqual(reader.get_tensor('scale').dtype, np.float16)

    def test_streamed_bf16_files_open_with_safetensors(self):
        path = self.tmp / 'mixed.safetensors'
        write_checkpoint(path, {
            'a': TensorSpec(DType.BF16, (4,), f32(1, 2, 3, 4)),
            'b': TensorSpec(DType.F32, (3,), f32(5, 6, 7)),
        })
        with safe_open(str(path), framework='numpy') as reader:
            self.assertEqual(sorted(reader.keys()), ['a', 'b'])
            self.assertEqual(reader.get_slice('a').get_dtype(), 'BF16')
            assert_array_equal(reader.get_tensor('b'), f32(5, 6, 7))

    def test_files_from_save_file_are_readable(self):
        path = self.tmp / 'external.safetensors'
        bias = np.array([1.5, -0.5], dtype=np.float32)
        save_file({'bias': bias, 'embed': np.ones((2, 2), dtype=np.float16)}, str(path), metadata={'step': '3'})
        with open_checkpoint(path) as ckpt:
            self.assertEqual(set(ckpt.names), {'bias', 'embed'})
            self.assertEqual(ckpt.meta('embed').dtype, DType.F16)
            self.assertEqual(ckpt.metadata, {'step': '3'})
            assert_array_equal(ckpt.read_tensor_f32('bias')[0], bias)
            assert_array_equal(ckpt.read_tensor_f32('embed')[0], np.ones(4, dtype=np.float32))


class DtypeCodecTests(SimpleTestCase):
    def test_bf16_widening_of_one(self):
        self.assertEqual(widen(b'\x80\x3f', DType.BF16)[0], np.float32(1.0))

    def test_bf16_rounds_half_to_even(self):
        # 1 + 2**-8 sits halfway between 1.0 and 1.0078125: rounds down to the even mantissa
        # 1 + 3 * 2**-8 sits halfway between 1.0078125 and 1.015625: rounds up to the even one
        encoded = narrow(f32(1 + 2 ** -8, 1 + 3 * 2 ** -8), DType.BF16)
        assert_array_equal(widen(encoded, DType.BF16), f32(1.0, 1.015625))

    def test_bf16_keeps_nan(self):
        self.assertTrue(np.isnan(widen(narrow(f32(np.nan), DType.BF16), DType.BF16)[0]))

    def test_widen_then_narrow_is_identity(self):
        rng = np.random.default_rng(0)
        for dtype in (DType.F16, DType.BF16):
            raw = rng.integers(0, 1 << 16, 500, dtype=np.uint16)
            widened = widen(raw.astype('<u2').tobytes(), dtype)
            finite = np.isfinite(widened)
            again = np.frombuffer(narrow(widened, dtype), dtype='<u2')
            assert_array_equal(again[finite], raw[finite])


class CompatibilityTests(TensorStoreTestCase):
    def write(self, name, tensors):
        path = self.tmp / f'{name}.safetensors'
        write_checkpoint(path, {key: TensorSpec(DType.F32, (size,), np.zeros(size)) for key, size in tensors.items()})
        return open_checkpoint(path)

    def test_all_common(self):
        base = self.write('base', {'a': 2, 'b': 3})
        tasks = [self.write(f't{i}', {'a': 2, 'b': 3}) for i in range(2)]
        profile = check_compatibility(base, tasks)
        self.assertEqual(profile.common, ('a', 'b'))
        self.assertTrue(profile.is_clean)

    def test_partial_tensor(self):
        base = self.write('base', {'a': 2, 'b': 3})
        tasks = [self.write('t1', {'a': 2, 'b': 3}), self.write('t2', {'a': 2})]
        profile = check_compatibility(base, tasks)
        self.assertEqual(profile.common, ('a',))
        self.assertEqual(profile.partial, ('b',))

    def test_shape_conflict(self):
        base = self.write('base', {'a': 2})
        tasks = [self.write('t1', {'a': 3})]
        profile = check_compatibility(base, tasks)
        self.assertEqual(profile.common, ())
        self.assertEqual(profile.shape_conflicts, ('a',))
        self.assertFalse(profile.is_clean)
