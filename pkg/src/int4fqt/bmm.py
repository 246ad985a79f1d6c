"""Quantized batched products ``T[b] = Q[b] K[b].T`` for attention.

Each batch has its own pair of step sizes, its own leverage scores and its
own sampling budget.  The arithmetic matches running the linear-layer path
once per batch, but is vectorized across the batch axis.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .backward import (
    LSS_MODES,
    apply_faults,
    bit_split_batched,
    make_rng,
    normalize_probabilities_batched,
)
from .exceptions import DegenerateInputError, InputError, StructureError
from .forward import ForwardCache
from .hadamard import DEFAULT_K_MAX, HadamardConfig, apply_block_hadamard, candidate_ks, select_block_size
from .layer import MODES
from .lsq import QN, QP, ClampMask, StepSize, cold_start_step
from .tensor import PackedInt4Matrix, QuantizedTensor, bmm_exact, pack_int4, row_norms


@dataclass(frozen=True)
class BmmCache:
    q: np.ndarray
    k: np.ndarray
    cfg: HadamardConfig | None = None
    s_q: np.ndarray | None = None
    s_k: np.ndarray | None = None
    # levels of all batches stacked as (B * rows) x M INT4 matrices
    q_ints: PackedInt4Matrix | None = None
    k_ints: PackedInt4Matrix | None = None
    mask_q: np.ndarray | None = None
    mask_k: np.ndarray | None = None
    delta_q: np.ndarray | None = None
    delta_k: np.ndarray | None = None

    @property
    def quantized(self) -> bool:
        return self.q_ints is not None

    @cached_property
    def levels_q(self) -> np.ndarray:
        return self.q_ints.values.reshape(self.q.shape)

    @cached_property
    def levels_k(self) -> np.ndarray:
        return self.k_ints.values.reshape(self.k.shape)

    def forward_cache(self, i: int) -> ForwardCache:
        """Batch ``i`` as a linear-layer cache (Q plays X, K plays W)."""
        return ForwardCache(
            x_hat=QuantizedTensor(pack_int4(self.levels_q[i]), float(self.s_q[i])),
            w_hat=QuantizedTensor(pack_int4(self.levels_k[i]), float(self.s_k[i])),
            mask_x=ClampMask(self.mask_q[i]),
            mask_w=ClampMask(self.mask_k[i]),
            cfg=self.cfg,
            delta_x=self.delta_q[i],
            delta_w=self.delta_k[i],
        )


@dataclass
class BmmGrads:
    grad_q: np.ndarray
    grad_k: np.ndarray
    grad_s_q: np.ndarray
    grad_s_k: np.ndarray
    sampled_fraction: float = 1.0


def _scales(steps, b) -> np.ndarray:
    if isinstance(steps, (int, float)):
        steps = [steps] * b
    vals = np.array([s.value if isinstance(s, StepSize) else float(s) for s in steps])
    if vals.shape != (b,):
        raise StructureError(f"expected {b} per-batch step sizes, got {vals.size}")
    if not np.all(np.isfinite(vals) & (vals > 0)):
        raise InputError("step sizes must be positive")
    return vals


def _check_bmm(q, k):
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.ndim != 3 or k.ndim != 3 or q.shape[0] != k.shape[0] or q.shape[2] != k.shape[2]:
        raise StructureError(f"incompatible BMM operands {q.shape} x {k.shape}")
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(k))):
        raise InputError("BMM operands contain NaN or Inf")
    return q, k


def _quantize(xh, s):
    ratio = xh / s[:, None, None]
    mask = (ratio >= -QN) & (ratio <= QP)
    levels = np.rint(np.clip(ratio, -QN, QP)).astype(np.int8)
    delta = levels - np.where(mask, ratio, 0.0)
    ints = pack_int4(levels.reshape(-1, levels.shape[2]))
    return ints, mask, delta


def bmm_forward(q, k, s_q, s_k, cfg: HadamardConfig) -> tuple[np.ndarray, BmmCache]:
    """Per-batch HQ-MM of ``T[b] = Q[b] K[b].T`` with per-batch step sizes."""
    q, k = _check_bmm(q, k)
    if cfg.dim != q.shape[2]:
        raise StructureError(f"Hadamard dim {cfg.dim} != inner dim {q.shape[2]}")
    b = q.shape[0]
    sq, sk = _scales(s_q, b), _scales(s_k, b)
    q_ints, mask_q, delta_q = _quantize(apply_block_hadamard(q, cfg), sq)
    k_ints, mask_k, delta_k = _quantize(apply_block_hadamard(k, cfg), sk)
    cache = BmmCache(q, k, cfg, sq, sk, q_ints, k_ints, mask_q, mask_k, delta_q, delta_k)
    out = (sq * sk)[:, None, None] * bmm_exact(cache.levels_q, cache.levels_k)
    return out, cache


def _minimax_batched(g):
    peak = np.abs(g).max(axis=(1, 2))
    scale = peak / 7.0
    safe = np.where(scale > 0, scale, 1.0)[:, None, None]
    return np.clip(np.rint(g / safe), -7, 7), scale


def _batched_mask(scores, budget, mode, seed):
    """Reweighting factors ``m / p`` and draws for every (batch, row)."""
    if mode == "exact":
        draws = np.ones(scores.shape, dtype=bool)
        return draws.astype(np.float64), draws
    if mode == "keep-positive":
        draws = scores > 0
        return draws.astype(np.float64), draws
    p = normalize_probabilities_batched(scores, budget)
    draws = make_rng(seed).random(p.shape) < p
    inv = np.zeros_like(p)
    inv[draws] = 1.0 / p[draws]
    return inv, draws


def _products(cache: BmmCache, grad_t, mode, lss_mode, seed):
    """``grad_t @ K_hat`` and ``grad_t.T @ Q_hat`` per batch (integer operands) plus the
    sampled fraction."""
    lq = cache.levels_q.astype(np.float64)
    lk = cache.levels_k.astype(np.float64)
    if mode in ("hq+exact-backward", "lsq-plain"):
        return grad_t @ lk, grad_t.transpose(0, 2, 1) @ lq, 1.0
    if mode == "minimax-backward":
        gl, scale = _minimax_batched(grad_t)
        s = scale[:, None, None]
        return s * (gl @ lk), s * (gl.transpose(0, 2, 1) @ lq), 1.0
    n = grad_t.shape[1]
    up, s_up, down, s_down = bit_split_batched(grad_t)
    stacked = np.concatenate([s_up[:, None, None] * up, s_down[:, None, None] * down], axis=1)
    norms = row_norms(stacked)
    q_norms = row_norms(lq)
    inv_k, draws_k = _batched_mask(norms * np.concatenate([q_norms, q_norms], axis=1), n,
                                   lss_mode, (*seed, 0))
    inv_q, draws_q = _batched_mask(norms, n, lss_mode, (*seed, 1))
    inv_k, inv_q = apply_faults(inv_k), apply_faults(inv_q)
    lq2 = np.concatenate([lq, lq], axis=1)
    p_k = (stacked * inv_k[..., None]).transpose(0, 2, 1) @ lq2
    rows_q = (stacked * inv_q[..., None]).reshape(grad_t.shape[0], 2, n, -1).sum(axis=1)
    p_q = rows_q @ lk
    frac = 0.5 * (float(np.mean(draws_k)) + float(np.mean(draws_q)))
    return p_q, p_k, frac


def _seed_tuple(rng_seed) -> tuple[int, ...]:
    if isinstance(rng_seed, (tuple, list)):
        return tuple(int(s) for s in rng_seed)
    return (int(rng_seed),)


def bmm_backward(cache: BmmCache, grad_t, rng_seed=0, mode="hq+lss", lss_mode="bernoulli",
                 exact_step_grads=False) -> BmmGrads:
    """Straight-through gradients for Q, K and the per-batch step sizes.

    ``grad_Q = s_K (mask_Q * grad_T K_hat) H.T`` and
    ``grad_K = s_Q (grad_T.T Q_hat * mask_K) H.T``, with leverage scores,
    probabilities and budgets taken per batch.
    """
    if mode not in MODES:
        raise InputError(f"unknown quantization mode {mode!r}")
    if lss_mode not in LSS_MODES:
        raise InputError(f"unknown LSS mode {lss_mode!r}")
    grad_t = np.asarray(grad_t, dtype=np.float64)
    b = cache.q.shape[0]
    if grad_t.shape != (b, cache.q.shape[1], cache.k.shape[1]):
        raise StructureError(f"grad_t is {grad_t.shape}")
    if not np.all(np.isfinite(grad_t)):
        raise InputError("grad_t contains NaN or Inf")
    if mode == "fp-exact":
        return BmmGrads(
            grad_q=np.matmul(grad_t, cache.k),
            grad_k=np.matmul(grad_t.transpose(0, 2, 1), cache.q),
            grad_s_q=np.zeros(b),
            grad_s_k=np.zeros(b),
        )
    if not cache.quantized:
        raise StructureError("cache does not come from a quantized forward")
    seed = _seed_tuple(rng_seed)
    p_q, p_k, frac = _products(cache, grad_t, mode, lss_mode, seed)
    if exact_step_grads and mode not in ("hq+exact-backward", "lsq-plain"):
        up_q, up_k, _ = _products(cache, grad_t, "hq+exact-backward", lss_mode, seed)
    else:
        up_q, up_k = p_q, p_k
    sq = cache.s_q[:, None, None]
    sk = cache.s_k[:, None, None]
    masked_q = np.where(cache.mask_q, p_q, 0.0)
    masked_k = np.where(cache.mask_k, p_k, 0.0)
    g_q = 1.0 / math.sqrt(QP * cache.delta_q[0].size)
    g_k = 1.0 / math.sqrt(QP * cache.delta_k[0].size)
    return BmmGrads(
        grad_q=sk * apply_block_hadamard(masked_q, cache.cfg),
        grad_k=sq * apply_block_hadamard(masked_k, cache.cfg),
        grad_s_q=g_q * np.sum((sk * up_q) * cache.delta_q, axis=(1, 2)),
        grad_s_k=g_k * np.sum((sq * up_k) * cache.delta_k, axis=(1, 2)),
        sampled_fraction=frac,
    )


def _refresh(steps: list[StepSize], xh) -> None:
    for s, part in zip(steps, xh):
        try:
            s.value = cold_start_step(part)
        except DegenerateInputError:
            pass


class QuantBMM:
    """Stateful wrapper around :func:`bmm_forward` with learnable per-batch steps.

    The block size is selected on the first call from all batches pooled
    together; during cold start every batch's steps follow the data.
    """

    def __init__(self, batch: int, dim: int, mode="hq+lss", k_max=DEFAULT_K_MAX,
                 cold_start_steps=200, lss_mode="bernoulli"):
        if mode not in MODES:
            raise InputError(f"unknown quantization mode {mode!r}")
        self.mode = mode
        self.batch = batch
        self.dim = dim
        self.k_max = 0 if mode == "lsq-plain" else k_max
        self.lss_mode = lss_mode
        self.hadamard: HadamardConfig | None = None
        self.s_q = [StepSize(1.0, True, cold_start_steps) for _ in range(batch)]
        self.s_k = [StepSize(1.0, True, cold_start_steps) for _ in range(batch)]
        self._init_steps = True

    def reinitialize(self) -> None:
        self.hadamard = None
        self._init_steps = True

    def forward(self, q, k) -> tuple[np.ndarray, BmmCache]:
        q, k = _check_bmm(q, k)
        if self.mode == "fp-exact":
            return np.matmul(q, k.transpose(0, 2, 1)), BmmCache(q, k)
        if q.shape[0] != self.batch or q.shape[2] != self.dim:
            raise StructureError(f"expected ({self.batch}, *, {self.dim}) operands, got {q.shape}")
        if self.hadamard is None:
            k_sel = 0
            if max(candidate_ks(self.dim, self.k_max), default=0) > 0:
                k_sel = select_block_size(q.reshape(-1, self.dim), k.reshape(-1, self.dim),
                                          None, None, self.k_max)
            self.hadamard = HadamardConfig(k_sel, self.dim)
        if self._init_steps or self.s_q[0].in_cold_start:
            _refresh(self.s_q, apply_block_hadamard(q, self.hadamard))
            _refresh(self.s_k, apply_block_hadamard(k, self.hadamard))
        self._init_steps = False
        return bmm_forward(q, k, self.s_q, self.s_k, self.hadamard)

    def backward(self, cache: BmmCache, grad_t, rng_seed=0) -> BmmGrads:
        return bmm_backward(cache, grad_t, rng_seed, self.mode, self.lss_mode)

    def sgd_step(self, grads: BmmGrads, lr: float) -> None:
        if self.mode == "fp-exact":
            return
        for steps, gs in ((self.s_q, grads.grad_s_q), (self.s_k, grads.grad_s_k)):
            for s, g in zip(steps, gs):
                s.sgd_update(float(g), lr)
                s.tick()
