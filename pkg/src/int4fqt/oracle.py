"""Brute-force references used to check the kernels.

Nothing here calls kernel internals: Hadamard matrices come from
``scipy.linalg.hadamard``, quantization is done one Python scalar at a time,
products are naive loops, and expectations are either enumerated exactly or
estimated by Monte Carlo.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg

from .backward import BitSplitPair, SampleMask
from .exceptions import InputError, ResourceError, StructureError
from .tensor import QuantizedTensor

MAX_ENUM_ROWS = 12


# -- scalar and dense references ----------------------------------------------


def nibble_encode(lo: int, hi: int) -> int:
    """Byte holding ``lo`` in the low nibble and ``hi`` in the high one."""
    return ((hi % 16) << 4) | (lo % 16)


def nibble_decode(byte: int) -> tuple[int, int]:
    lo, hi = byte & 15, byte >> 4
    return (lo - 16 if lo > 7 else lo), (hi - 16 if hi > 7 else hi)


def lsq_scalar(x: float, s: float, qn: int = 7, qp: int = 7) -> tuple[int, bool]:
    r = x / s
    inside = -qn <= r <= qp
    return int(round(min(max(r, -qn), qp))), inside


def lsq_dense(x, s, qn: int = 7, qp: int = 7) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    levels = np.empty(x.shape, dtype=np.int64)
    inside = np.empty(x.shape, dtype=bool)
    for idx, v in np.ndenumerate(x):
        levels[idx], inside[idx] = lsq_scalar(float(v), s, qn, qp)
    return levels, inside


def dense_hadamard(k: int, dim: int) -> np.ndarray:
    """Explicit block-diagonal normalized Hadamard matrix."""
    if dim % (1 << k):
        raise StructureError(f"2^{k} does not divide {dim}")
    hk = scipy.linalg.hadamard(1 << k).astype(np.float64) / math.sqrt(1 << k)
    return scipy.linalg.block_diag(*([hk] * (dim // (1 << k))))


def naive_matmul(a, b) -> np.ndarray:
    """Triple-loop ``a @ b`` (Python floats or ints, no BLAS)."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape[1] != b.shape[0]:
        raise StructureError(f"{a.shape} x {b.shape}")
    n, m, p = a.shape[0], a.shape[1], b.shape[1]
    al, bl = a.tolist(), b.tolist()
    out = [[0] * p for _ in range(n)]
    for i in range(n):
        for j in range(p):
            acc = 0
            for t in range(m):
                acc += al[i][t] * bl[t][j]
            out[i][j] = acc
    return np.array(out, dtype=np.float64)


def hq_mm_oracle(x, w, s_x: float, s_w: float, k: int) -> np.ndarray:
    """``s_x s_w round(clamp(XH/s_x)) round(clamp(WH/s_w)).T`` with dense H."""
    h = dense_hadamard(k, np.shape(x)[1])
    lx, _ = lsq_dense(np.asarray(x) @ h, s_x)
    lw, _ = lsq_dense(np.asarray(w) @ h, s_w)
    return s_x * s_w * (lx @ lw.T).astype(np.float64)


# -- bit-split products --------------------------------------------------------


def exact_bs_product(bs: BitSplitPair, x_hat: QuantizedTensor) -> np.ndarray:
    """Unsampled ``s_up * up.T X + s_down * down.T X`` by naive loops."""
    up = bs.up.values.astype(int).tolist()
    down = bs.down.values.astype(int).tolist()
    x = x_hat.levels.astype(int).tolist()
    n, c, d = len(up), bs.up.cols, x_hat.shape[1]
    if len(x) != n:
        raise StructureError(f"{n} gradient rows vs {len(x)} x_hat rows")
    out = np.zeros((c, d))
    for j in range(c):
        for t in range(d):
            hi = sum(up[i][j] * x[i][t] for i in range(n))
            lo = sum(down[i][j] * x[i][t] for i in range(n))
            out[j, t] = bs.s_up * hi + bs.s_down * lo
    return out


def exact_bs_activation_product(bs: BitSplitPair, w_hat: QuantizedTensor) -> np.ndarray:
    """Unsampled ``(s_up * up + s_down * down) @ W`` by naive loops."""
    up = bs.up.values.astype(int).tolist()
    down = bs.down.values.astype(int).tolist()
    w = w_hat.levels.astype(int).tolist()
    n, c, d = len(up), bs.up.cols, w_hat.shape[1]
    if len(w) != c:
        raise StructureError(f"{c} gradient cols vs {len(w)} w_hat rows")
    out = np.zeros((n, d))
    for i in range(n):
        for t in range(d):
            hi = sum(up[i][j] * w[j][t] for j in range(c))
            lo = sum(down[i][j] * w[j][t] for j in range(c))
            out[i, t] = bs.s_up * hi + bs.s_down * lo
    return out


# -- expectations --------------------------------------------------------------


def enumerate_mask_expectation(
    scores, probs, evaluator: Callable[[SampleMask], np.ndarray]
) -> tuple[np.ndarray, float]:
    """Exact mean and Frobenius variance of ``evaluator`` over every mask outcome.

    Each outcome is weighted by ``prod p_i^m_i (1 - p_i)^(1 - m_i)``.
    ``scores`` is only used to check that zero-probability rows are harmless.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.size > MAX_ENUM_ROWS:
        raise ResourceError(f"{p.size} rows exceeds the enumeration cap of {MAX_ENUM_ROWS}")
    c = np.asarray(scores, dtype=np.float64)
    if c.shape != p.shape:
        raise StructureError("scores and probs differ in length")
    outcomes, weights = [], []
    for bits in itertools.product((False, True), repeat=p.size):
        m = np.array(bits, dtype=bool)
        weight = float(np.prod(np.where(m, p, 1.0 - p)))
        if weight == 0.0:
            continue
        inv = np.zeros_like(p)
        inv[m] = 1.0 / p[m]
        outcomes.append(np.asarray(evaluator(SampleMask(p, m, inv)), dtype=np.float64))
        weights.append(weight)
    weights = np.array(weights)
    stack = np.stack(outcomes)
    mean = np.tensordot(weights, stack, axes=1)
    dev = (stack - mean).reshape(len(weights), -1)
    variance = float(np.dot(weights, np.sum(dev * dev, axis=1)))
    return mean, variance


@dataclass(frozen=True)
class McReport:
    mean: np.ndarray
    variance: float
    trials: int
    std_error: float
    entry_std_error: np.ndarray

    def max_bias_z(self, expected) -> float:
        """Largest per-entry ``|mean - expected| / SE`` (zero-SE entries must match to rounding)."""
        expected = np.asarray(expected, dtype=np.float64)
        diff = np.abs(self.mean - expected)
        se = self.entry_std_error
        tol = 1e-9 * np.maximum(1.0, np.abs(expected))
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(se > 0, diff / se, np.where(diff > tol, np.inf, 0.0))
        return float(np.max(z)) if z.size else 0.0


def mc_estimate(evaluator: Callable[[int], np.ndarray], seeds: int, first_seed: int = 0) -> McReport:
    """Sample mean, Frobenius variance and standard errors over ``seeds`` trials."""
    if seeds < 100:
        raise InputError(f"need at least 100 trials, got {seeds}")
    total = total_sq = None
    for seed in range(first_seed, first_seed + seeds):
        v = np.asarray(evaluator(seed), dtype=np.float64)
        if total is None:
            total = np.zeros_like(v)
            total_sq = np.zeros_like(v)
        total += v
        total_sq += v * v
    mean = total / seeds
    entry_var = np.maximum(total_sq / seeds - mean * mean, 0.0) * seeds / (seeds - 1)
    variance = float(np.sum(entry_var))
    return McReport(
        mean=mean,
        variance=variance,
        trials=seeds,
        std_error=math.sqrt(variance / seeds),
        entry_std_error=np.sqrt(entry_var / seeds),
    )


# -- finite differences --------------------------------------------------------


def finite_diff_grad(loss: Callable[[np.ndarray], float], params, eps: float = 1e-5) -> np.ndarray:
    """Central differences ``(L(p + eps e) - L(p - eps e)) / (2 eps)`` per coordinate."""
    if not eps > 0:
        raise InputError("eps must be positive")
    p = np.array(params, dtype=np.float64)
    grad = np.zeros_like(p)
    for idx in np.ndindex(p.shape):
        orig = p[idx]
        p[idx] = orig + eps
        up = loss(p)
        p[idx] = orig - eps
        dn = loss(p)
        p[idx] = orig
        if not (math.isfinite(up) and math.isfinite(dn)):
            raise InputError(f"loss is not finite near index {idx}")
        grad[idx] = (up - dn) / (2 * eps)
    return grad


def rounding_residual(z, s: float) -> np.ndarray:
    """``round(clamp(z/s)) - clamp(z/s)``: the part of the quantizer STE ignores."""
    c = np.clip(np.asarray(z) / s, -7, 7)
    return np.round(c) - c


def ste_linear(x, w, s_x: float, s_w: float, h, res_x, res_w) -> np.ndarray:
    """Quantized linear output with the rounding residuals frozen.

    At the point where ``res_x``/``res_w`` were taken this equals the real
    quantized output, and its derivative is the straight-through gradient.
    """
    qx = s_x * (np.clip(x @ h / s_x, -7, 7) + res_x)
    qw = s_w * (np.clip(w @ h / s_w, -7, 7) + res_w)
    return qx @ qw.T


def distance_to_boundaries(z, s: float) -> float:
    """Smallest distance (in units of ``s``) from ``z/s`` to a rounding or clamp boundary."""
    r = np.asarray(z) / s
    to_half = np.abs(r - np.floor(r) - 0.5)
    to_clamp = np.abs(np.abs(r) - 7)
    return float(min(np.min(to_half), np.min(to_clamp)))
