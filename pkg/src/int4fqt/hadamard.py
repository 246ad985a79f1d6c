"""Block-diagonal Hadamard transforms and block-size selection."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import ResourceError, StructureError
from .lsq import cold_start_step, lsq_levels

MAX_K = 12
DEFAULT_K_MAX = 5


@dataclass(frozen=True)
class HadamardConfig:
    """Block exponent ``k`` and width ``dim``; H = BlockDiag(H_k, ..., H_k)."""

    k: int
    dim: int

    def __post_init__(self):
        if self.k < 0 or self.dim <= 0:
            raise StructureError(f"invalid Hadamard config k={self.k}, dim={self.dim}")
        if self.dim % (1 << self.k):
            raise StructureError(f"block size 2^{self.k} does not divide dim {self.dim}")

    @property
    def block(self) -> int:
        return 1 << self.k


def build_hk(k: int) -> np.ndarray:
    """Normalized Sylvester-Hadamard matrix of order ``2**k``."""
    if k < 0:
        raise StructureError(f"k must be non-negative, got {k}")
    if k > MAX_K:
        raise ResourceError(f"k={k} exceeds the cap of {MAX_K}")
    h = np.ones((1, 1))
    for _ in range(k):
        h = np.block([[h, h], [h, -h]]) / math.sqrt(2.0)
    return h


def block_hadamard_matrix(cfg: HadamardConfig) -> np.ndarray:
    """The explicit ``dim x dim`` block-diagonal matrix (for small dims only)."""
    hk = build_hk(cfg.k)
    return np.kron(np.eye(cfg.dim // cfg.block), hk)


def apply_block_hadamard(x, cfg: HadamardConfig) -> np.ndarray:
    """Right-multiply every row of ``x`` by the block-diagonal Hadamard matrix.

    Works on any leading batch shape; the last axis must equal ``cfg.dim``.
    Uses in-place-style butterflies with a 1/sqrt(2) factor per stage.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != cfg.dim:
        raise StructureError(f"last dim {x.shape[-1]} != Hadamard dim {cfg.dim}")
    if cfg.k == 0:
        return x.copy()
    lead = x.shape[:-1]
    n = cfg.block
    out = x.reshape(*lead, cfg.dim // n, n).copy()
    inv_sqrt2 = 1.0 / math.sqrt(2.0)
    h = 1
    while h < n:
        v = out.reshape(*lead, cfg.dim // n, n // (2 * h), 2, h)
        a = v[..., 0, :].copy()
        b = v[..., 1, :]
        v[..., 0, :] = (a + b) * inv_sqrt2
        v[..., 1, :] = (a - b) * inv_sqrt2
        h *= 2
    return out.reshape(x.shape)


def candidate_ks(dim: int, k_max: int) -> list[int]:
    return [k for k in range(0, min(k_max, MAX_K) + 1) if dim % (1 << k) == 0]


def _reconstruction_mse(x, k, s):
    cfg = HadamardConfig(k, x.shape[-1])
    xh = apply_block_hadamard(x, cfg)
    step = cold_start_step(xh) if s is None else s
    levels, _ = lsq_levels(xh, step)
    xbar = apply_block_hadamard(step * levels.astype(np.float64), cfg)
    return float(np.mean((xbar - x) ** 2))


def block_size_errors(x, w, s_x=None, s_w=None, k_max: int = DEFAULT_K_MAX) -> dict[int, float]:
    """Quantization error ``MSE(Xbar_k, X) * MSE(Wbar_k, W)`` for every candidate k.

    A step of None is re-derived for each k with the cold-start rule applied to
    the transformed tensor.
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if x.shape[-1] != w.shape[-1]:
        raise StructureError(f"inner dims differ: {x.shape} vs {w.shape}")
    ks = candidate_ks(x.shape[-1], k_max)
    if not ks:
        raise StructureError("no admissible block size")
    return {k: _reconstruction_mse(x, k, s_x) * _reconstruction_mse(w, k, s_w) for k in ks}


def select_block_size(x, w, s_x=None, s_w=None, k_max: int = DEFAULT_K_MAX) -> int:
    """Block exponent minimizing the product of reconstruction errors.

    Ties go to the smaller k.
    """
    errors = block_size_errors(x, w, s_x, s_w, k_max)
    best = min(errors)
    for k in sorted(errors):
        if errors[k] < errors[best]:
            best = k
    return best
