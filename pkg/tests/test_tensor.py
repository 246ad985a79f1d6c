import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from int4fqt import oracle
from int4fqt.exceptions import InputError, RangeError, StructureError
from int4fqt.tensor import (
    PackedInt4Matrix,
    QuantizedTensor,
    bmm_exact,
    dump_int4,
    load_int4,
    mm_exact,
    pack_int,
    pack_int4,
    read_int4,
    row_norms,
    save_int4,
    unpack_int4,
)

int4_matrices = hnp.arrays(
    np.int8,
    hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=9),
    elements=st.integers(-8, 7),
)


def test_zero_packs_to_zero_byte():
    assert pack_int4([[0]]).payload == b"\x00"


def test_known_pair_layout():
    # -1 in the low nibble (0xF), 7 in the high nibble
    assert pack_int4([[-1, 7]]).payload == bytes([0x7F])
    assert unpack_int4(PackedInt4Matrix(1, 2, bytes([0x7F]))).tolist() == [[-1, 7]]
    assert unpack_int4(PackedInt4Matrix(1, 1, b"\x00")).tolist() == [[0]]


def test_every_nibble_pair_matches_independent_encoder():
    for lo, hi in itertools.product(range(-8, 8), repeat=2):
        assert pack_int4([[lo, hi]]).payload[0] == oracle.nibble_encode(lo, hi)
    for byte in range(256):
        m = PackedInt4Matrix(1, 2, bytes([byte]))
        assert tuple(unpack_int4(m)[0]) == oracle.nibble_decode(byte)


def test_all_sixteen_values_round_trip():
    v = np.arange(-8, 8).reshape(1, 16)
    assert np.array_equal(unpack_int4(pack_int4(v)), v)
    assert np.array_equal(unpack_int4(pack_int4(v.T)), v.T)


@given(int4_matrices)
def test_round_trip_property(v):
    packed = pack_int4(v)
    assert len(packed.payload) == v.shape[0] * ((v.shape[1] + 1) // 2)
    out = unpack_int4(packed)
    assert np.array_equal(out, v)
    # re-packing the decoded values reproduces the payload, so padding is zero
    assert pack_int4(out).payload == packed.payload


@given(st.integers(1, 6), st.integers(1, 5), st.data())
def test_unpack_pack_identity_on_random_payloads(rows, half, data):
    payload = data.draw(st.binary(min_size=rows * half, max_size=rows * half))
    m = PackedInt4Matrix(rows, 2 * half, payload)
    assert pack_int4(unpack_int4(m)).payload == payload


def test_out_of_range_names_position():
    with pytest.raises(RangeError, match="row 1, col 2"):
        pack_int4([[0, 0, 0], [0, 0, 8]])
    with pytest.raises(RangeError):
        pack_int4([[-9]])


def test_payload_length_mismatch():
    with pytest.raises(StructureError):
        PackedInt4Matrix(2, 3, b"\x00\x00\x00")


def test_nonzero_padding_nibble_rejected():
    with pytest.raises(StructureError):
        PackedInt4Matrix(1, 1, b"\x10")


def test_wide_packing_round_trip():
    v = np.array([[-127, 0, 127], [5, -5, 64]])
    m = pack_int(v, 8)
    assert len(m.payload) == 6
    assert np.array_equal(unpack_int4(m), v)


def test_binary_dump_format(tmp_path):
    m = pack_int4([[1, -2, 3], [-8, 7, 0]])
    blob = dump_int4(m)
    assert blob[:8] == (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert blob[8:] == m.payload
    assert load_int4(blob) == m
    save_int4(m, tmp_path / "m.int4")
    assert read_int4(tmp_path / "m.int4") == m
    with pytest.raises(StructureError):
        load_int4(blob[:5])


def test_mm_exact_small_cases():
    assert np.array_equal(mm_exact(np.eye(2), np.eye(2)), np.eye(2))
    assert mm_exact([[1.0, 2.0]], [[3.0, 4.0]]).tolist() == [[11.0]]
    with pytest.raises(StructureError):
        mm_exact(np.ones((2, 3)), np.ones((2, 4)))
    with pytest.raises(InputError):
        mm_exact([[np.nan]], [[1.0]])


@pytest.mark.parametrize("n", [8, 33, 64])
def test_mm_exact_matches_triple_loop_on_integers(n):
    rng = np.random.default_rng(n)
    a = rng.integers(-7, 8, size=(n, n))
    b = rng.integers(-7, 8, size=(n, n))
    assert np.array_equal(mm_exact(a, b), oracle.naive_matmul(a, b.T))


def test_mm_exact_real_inputs_close_to_triple_loop():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(8, 8)), rng.normal(size=(8, 8))
    np.testing.assert_allclose(mm_exact(a, b), oracle.naive_matmul(a, b.T), rtol=1e-12, atol=1e-13)


def test_mm_exact_transpose_flags():
    rng = np.random.default_rng(2)
    a, b = rng.integers(-7, 8, size=(5, 3)), rng.integers(-7, 8, size=(5, 4))
    assert np.array_equal(mm_exact(a, b, trans_a=True, trans_b=False), (a.T @ b).astype(float))


def test_bmm_exact():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(1, 4, 6))
    b = rng.normal(size=(1, 5, 6))
    assert np.array_equal(bmm_exact(a, b)[0], mm_exact(a[0], b[0]))
    eye = np.stack([np.eye(3)] * 2)
    assert np.array_equal(bmm_exact(eye, eye), eye)
    a = rng.integers(-7, 8, size=(3, 4, 6))
    b = rng.integers(-7, 8, size=(3, 5, 6))
    ref = np.stack([oracle.naive_matmul(a[i], b[i].T) for i in range(3)])
    assert np.array_equal(bmm_exact(a, b), ref)
    with pytest.raises(StructureError):
        bmm_exact(a, b[:2])


def test_row_norms():
    assert row_norms([[3.0, 4.0]]).tolist() == [5.0]
    assert np.array_equal(row_norms(np.zeros((3, 2))), np.zeros(3))
    rng = np.random.default_rng(4)
    m = rng.normal(size=(16, 4))
    ref = np.array([np.sqrt(sum(v * v for v in row)) for row in m.tolist()])
    np.testing.assert_allclose(row_norms(m), ref, rtol=1e-12)


def test_quantized_tensor_requires_positive_scale():
    with pytest.raises(InputError):
        QuantizedTensor(pack_int4([[1]]), 0.0)


@settings(max_examples=50)
@given(int4_matrices, st.floats(1e-3, 1e3))
def test_quantized_tensor_dequantized_range(v, scale):
    q = QuantizedTensor(pack_int4(np.clip(v, -7, 7)), scale)
    deq = q.scale * q.levels
    assert np.all(np.abs(deq) <= 7 * scale + 1e-12)
