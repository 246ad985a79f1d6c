"""Learned-step-size quantization and the baseline quantizers it is compared to."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import DegenerateInputError, InputError, StructureError
from .tensor import QuantizedTensor, as_dense, pack_int

QN = 7
QP = 7
MIN_STEP = 1e-8


@dataclass
class StepSize:
    """A positive quantization step, optionally learned by SGD.

    While ``cold_start_remaining > 0`` the step is reset from the data on every
    call instead of being learned.
    """

    value: float
    learnable: bool = True
    cold_start_remaining: int = 0

    def __post_init__(self):
        if not (math.isfinite(self.value) and self.value > 0):
            raise InputError(f"step size must be positive, got {self.value}")
        self.value = float(self.value)

    @property
    def in_cold_start(self) -> bool:
        return self.cold_start_remaining > 0

    def sgd_update(self, grad: float, lr: float) -> None:
        if self.learnable and not self.in_cold_start:
            self.value = max(self.value - lr * grad, MIN_STEP)

    def tick(self) -> None:
        """Advance the cold-start counter by one optimizer step."""
        if self.cold_start_remaining > 0:
            self.cold_start_remaining -= 1


@dataclass(frozen=True)
class ClampMask:
    """``bits[i, j]`` is True where the scaled input was inside ``[-QN, QP]``."""

    bits: np.ndarray

    @property
    def rows(self) -> int:
        return self.bits.shape[0]

    @property
    def cols(self) -> int:
        return self.bits.shape[1]


def _step(s) -> float:
    value = s.value if isinstance(s, StepSize) else float(s)
    if not (math.isfinite(value) and value > 0):
        raise InputError(f"step size must be positive, got {value}")
    return value


def lsq_levels(x, s, qn: int = QN, qp: int = QP) -> tuple[np.ndarray, np.ndarray]:
    """Integer levels ``round(clamp(x / s, -qn, qp))`` and the in-range mask.

    Rounding is half-to-even.  ``qn``/``qp`` other than 7 are only used to
    study how the error shrinks with wider grids.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InputError("cannot quantize NaN or Inf")
    ratio = x / _step(s)
    mask = (ratio >= -qn) & (ratio <= qp)
    levels = np.rint(np.clip(ratio, -qn, qp)).astype(np.int8 if qp < 128 else np.int64)
    return levels, mask


def lsq_quantize(x, s) -> tuple[QuantizedTensor, ClampMask]:
    x = as_dense(x)
    levels, mask = lsq_levels(x, s)
    return QuantizedTensor(pack_int(levels, 4), _step(s)), ClampMask(mask)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    return q.scale * q.levels.astype(np.float64)


def lsq_delta(x, s) -> np.ndarray:
    """Per-element ``round(clamp(x/s)) - mask * (x/s)``: the d(s * xq)/ds term."""
    x = np.asarray(x, dtype=np.float64)
    levels, mask = lsq_levels(x, s)
    return levels - np.where(mask, x / _step(s), 0.0)


def step_size_gradient(upstream, delta, n_elements: int) -> float:
    """Scaled step-size gradient ``sum(upstream * delta) / sqrt(QP * n)``."""
    upstream = np.asarray(upstream, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if upstream.shape != delta.shape:
        raise StructureError(f"upstream {upstream.shape} vs delta {delta.shape}")
    if n_elements != delta.size:
        raise StructureError(f"n_elements={n_elements} but tensor has {delta.size}")
    g = 1.0 / math.sqrt(QP * n_elements)
    return g * float(np.sum(upstream * delta))


def cold_start_step(x) -> float:
    """Heuristic step ``2 * mean(|x|) / sqrt(QP)`` used before steps are learned."""
    x = np.asarray(x, dtype=np.float64)
    m = float(np.mean(np.abs(x))) if x.size else 0.0
    if not m > 0:
        raise DegenerateInputError("cold-start step of an all-zero tensor would be 0")
    return 2.0 * m / math.sqrt(QP)


def minimax_quantize(x, bits: int = 4) -> QuantizedTensor:
    """Symmetric minimax quantizer: the scale maps ``max|x|`` to the top level."""
    if not 2 <= bits <= 8:
        raise StructureError(f"bits must be in [2, 8], got {bits}")
    x = as_dense(x)
    top = (1 << (bits - 1)) - 1
    peak = float(np.max(np.abs(x))) if x.size else 0.0
    scale = peak / top
    if scale == 0.0:
        # all zero, or so close to zero that the scale underflows
        raise DegenerateInputError("minimax scale of an all-zero tensor would be 0")
    levels = np.clip(np.rint(x / scale), -top, top)
    return QuantizedTensor(pack_int(levels.astype(np.int8), max(bits, 4)), scale)


def outlier_keep_quantize(
    x, keep_fraction: float = 0.01, s=None
) -> tuple[QuantizedTensor, list[tuple[int, int, float]]]:
    """Keep the largest-magnitude entries exactly and LSQ-quantize the rest.

    Returns the quantized remainder and ``(row, col, value)`` residuals.  When
    ``s`` is None the remainder's step comes from :func:`cold_start_step`.
    """
    if not 0 < keep_fraction < 1:
        raise StructureError(f"keep_fraction must be in (0, 1), got {keep_fraction}")
    x = as_dense(x)
    n_keep = min(math.ceil(keep_fraction * x.size), x.size)
    flat = np.abs(x).ravel()
    # stable sort so ties resolve to the earliest index
    order = np.argsort(-flat, kind="stable")[:n_keep]
    rows, cols = np.unravel_index(order, x.shape)
    residuals = [(int(r), int(c), float(x[r, c])) for r, c in zip(rows, cols)]
    rest = x.copy()
    rest[rows, cols] = 0.0
    if s is None:
        s = cold_start_step(rest) if np.any(rest) else 1.0
    q, _ = lsq_quantize(rest, s)
    return q, residuals


def reconstruct_outlier_keep(q: QuantizedTensor, residuals) -> np.ndarray:
    out = dequantize(q)
    for r, c, v in residuals:
        out[r, c] = v
    return out


__all__ = [
    "QN",
    "QP",
    "ClampMask",
    "StepSize",
    "cold_start_step",
    "dequantize",
    "lsq_delta",
    "lsq_levels",
    "lsq_quantize",
    "minimax_quantize",
    "outlier_keep_quantize",
    "reconstruct_outlier_keep",
    "step_size_gradient",
]
