"""Dense and packed low-bit integer matrices plus exact reference products.

Dense matrices are plain 2-D ``float64`` numpy arrays.  Low-bit integer
matrices are stored packed: two signed 4-bit values per byte, the element at
the even column index in the low nibble and the odd one in the high nibble,
i.e. ``byte = (v[1] << 4) | (v[0] & 15)``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .exceptions import InputError, RangeError, StructureError

INT4_MIN = -8
INT4_MAX = 7

_HEADER = struct.Struct("<II")


def as_dense(x, name: str = "x") -> np.ndarray:
    """Validate ``x`` as a finite 2-D matrix and return it as float64."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise StructureError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} contains NaN or Inf")
    return arr


def _int_range(bits: int) -> tuple[int, int]:
    return -(1 << (bits - 1)), (1 << (bits - 1)) - 1


def _payload_width(cols: int, bits: int) -> int:
    return (cols + 1) // 2 if bits == 4 else cols


@dataclass(frozen=True)
class PackedInt4Matrix:
    """Row-major packed signed integer matrix.

    ``bits == 4`` is the nibble-packed INT4 layout.  Widths 5..8 store one
    two's-complement byte per value; they exist for the wider baseline
    quantizers and are never written by the binary dump.
    """

    rows: int
    cols: int
    payload: bytes
    bits: int = 4

    def __post_init__(self):
        if self.rows < 0 or self.cols < 0:
            raise StructureError(f"negative shape ({self.rows}, {self.cols})")
        if not 4 <= self.bits <= 8:
            raise StructureError(f"unsupported bit width {self.bits}")
        expected = self.rows * _payload_width(self.cols, self.bits)
        if len(self.payload) != expected:
            raise StructureError(
                f"payload has {len(self.payload)} bytes, expected {expected} "
                f"for a {self.rows}x{self.cols} int{self.bits} matrix"
            )
        if self.bits == 4 and self.cols % 2 == 1 and self.rows:
            raw = np.frombuffer(self.payload, dtype=np.uint8).reshape(self.rows, -1)
            if np.any(raw[:, -1] >> 4):
                raise StructureError("padding nibble of an odd-width row is not zero")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @cached_property
    def values(self) -> np.ndarray:
        """Decoded values as a read-only int8 array."""
        out = _decode(self.payload, self.rows, self.cols, self.bits)
        out.flags.writeable = False
        return out


def _decode(payload: bytes, rows: int, cols: int, bits: int) -> np.ndarray:
    raw = np.frombuffer(payload, dtype=np.uint8)
    if bits != 4:
        return raw.view(np.int8).reshape(rows, cols).copy()
    raw = raw.reshape(rows, (cols + 1) // 2)
    low = (raw & 0x0F).astype(np.int8)
    high = (raw >> 4).astype(np.int8)
    out = np.empty((rows, 2 * raw.shape[1]), dtype=np.int8)
    # sign-extend the nibble: (n ^ 8) - 8
    out[:, 0::2] = (low ^ 8) - 8
    out[:, 1::2] = (high ^ 8) - 8
    return out[:, :cols].copy()


def pack_int(values, bits: int = 4) -> PackedInt4Matrix:
    """Pack an integer matrix with entries representable in ``bits`` bits."""
    v = np.asarray(values)
    if v.ndim != 2:
        raise StructureError(f"expected a 2-D integer matrix, got shape {v.shape}")
    if v.size and not np.issubdtype(v.dtype, np.integer):
        if not np.all(np.isfinite(v)) or np.any(v != np.round(v)):
            raise RangeError("packed matrices hold integers only")
    lo, hi = _int_range(bits)
    if v.size and (v.min() < lo or v.max() > hi):
        r, c = np.argwhere((v < lo) | (v > hi))[0]
        raise RangeError(
            f"value {v[r, c]} at row {r}, col {c} outside [{lo}, {hi}]"
        )
    v = v.astype(np.int8)
    rows, cols = v.shape
    if bits != 4:
        m = PackedInt4Matrix(rows, cols, v.tobytes(), bits)
    else:
        w = v
        if cols % 2:
            w = np.concatenate([v, np.zeros((rows, 1), dtype=np.int8)], axis=1)
        u = w.view(np.uint8)
        packed = ((u[:, 1::2] & 0x0F) << 4) | (u[:, 0::2] & 0x0F)
        m = PackedInt4Matrix(rows, cols, packed.astype(np.uint8).tobytes(), 4)
    # the decoded view is exactly ``v``; seed the cache instead of decoding again
    v.flags.writeable = False
    m.__dict__["values"] = v
    return m


def pack_int4(values) -> PackedInt4Matrix:
    """Pack a matrix of integers in [-8, 7], two values per byte."""
    return pack_int(values, 4)


def unpack_int4(m: PackedInt4Matrix) -> np.ndarray:
    """Decode a packed matrix into a fresh int8 array."""
    return np.array(m.values)


def dump_int4(m: PackedInt4Matrix) -> bytes:
    """Serialize: ``rows`` and ``cols`` as little-endian u32, then the payload."""
    if m.bits != 4:
        raise StructureError("only 4-bit matrices have a binary dump format")
    return _HEADER.pack(m.rows, m.cols) + m.payload


def load_int4(data: bytes) -> PackedInt4Matrix:
    if len(data) < _HEADER.size:
        raise StructureError("truncated header")
    rows, cols = _HEADER.unpack_from(data)
    return PackedInt4Matrix(rows, cols, bytes(data[_HEADER.size:]), 4)


def save_int4(m: PackedInt4Matrix, path) -> None:
    Path(path).write_bytes(dump_int4(m))


def read_int4(path) -> PackedInt4Matrix:
    return load_int4(Path(path).read_bytes())


_F64_EXACT = 2**53


def _operand(x, name):
    arr = np.asarray(x)
    if np.issubdtype(arr.dtype, np.integer):
        return arr
    return as_dense(arr, name) if arr.ndim == 2 else np.asarray(arr, dtype=np.float64)


def _int_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact integer product as float64.

    When every partial sum is bounded by 2^53 the float64 BLAS product is
    exact, which covers all INT4/INT8 operands; otherwise fall back to int64.
    """
    if a.size == 0 or b.size == 0:
        return np.zeros((a.shape[0], b.shape[1]))
    bound = a.shape[1] * int(np.abs(a).max()) * int(np.abs(b).max())
    if bound < _F64_EXACT:
        return a.astype(np.float64) @ b.astype(np.float64)
    return (a.astype(np.int64) @ b.astype(np.int64)).astype(np.float64)


def mm_exact(a, b, *, trans_a: bool = False, trans_b: bool = True) -> np.ndarray:
    """Reference product ``op(a) @ op(b)``; by default ``a @ b.T``.

    Two integer operands give an exact integer result, so INT4 x INT4
    products and their accumulations are exact.
    """
    a = _operand(a, "a")
    b = _operand(b, "b")
    if a.ndim != 2 or b.ndim != 2:
        raise StructureError("mm_exact expects 2-D operands")
    a = a.T if trans_a else a
    b = b.T if trans_b else b
    if a.shape[1] != b.shape[0]:
        raise StructureError(
            f"inner dimensions differ: {a.shape} x {b.shape}"
        )
    if np.issubdtype(a.dtype, np.integer) and np.issubdtype(b.dtype, np.integer):
        return _int_matmul(a, b)
    return (a @ b).astype(np.float64)


def bmm_exact(a, b) -> np.ndarray:
    """Batched ``a[i] @ b[i].T`` for ``a`` of shape BxNxM and ``b`` BxPxM."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 3 or b.ndim != 3:
        raise StructureError("bmm_exact expects 3-D operands")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[2]:
        raise StructureError(f"batched shapes incompatible: {a.shape} x {b.shape}")
    if np.issubdtype(a.dtype, np.integer) and np.issubdtype(b.dtype, np.integer):
        if a.size == 0 or b.size == 0:
            return np.zeros((a.shape[0], a.shape[1], b.shape[1]))
        bound = a.shape[2] * int(np.abs(a).max()) * int(np.abs(b).max())
        dtype = np.float64 if bound < _F64_EXACT else np.int64
        return np.matmul(a.astype(dtype), b.astype(dtype).transpose(0, 2, 1)).astype(np.float64)
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise InputError("bmm_exact operands contain NaN or Inf")
    return np.matmul(a, b.transpose(0, 2, 1))


def row_norms(m) -> np.ndarray:
    """Euclidean norm of every row (over the last axis)."""
    m = np.asarray(m, dtype=np.float64)
    return np.sqrt(np.einsum("...j,...j->...", m, m))


@dataclass(frozen=True)
class QuantizedTensor:
    """Packed integer levels together with the positive step that scales them."""

    ints: PackedInt4Matrix
    scale: float

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise InputError(f"scale must be positive, got {self.scale}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.ints.shape

    @property
    def levels(self) -> np.ndarray:
        """Integer levels (read-only int8 view)."""
        return self.ints.values
