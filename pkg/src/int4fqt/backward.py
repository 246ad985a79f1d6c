"""Bit splitting and leverage-score sampling for the backward products.

The output gradient ``G`` (N x C) is split into two INT4 halves,
``G ~ s_up * up + s_down * down``.  Stacking the halves gives 2N rows; each
row is kept with probability ``p_i`` (sum of ``p`` is N) and reweighted by
``1 / p_i``, which keeps the estimate unbiased at half the INT4 work.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from .exceptions import InfeasibleError, InputError, StructureError
from .tensor import PackedInt4Matrix, QuantizedTensor, as_dense, pack_int4, row_norms

LSS_MODES = ("bernoulli", "keep-positive", "exact")

_FAULTS: set[str] = set()


@contextlib.contextmanager
def inject_fault(name: str):
    """Test-only sabotage switch; ``"lss-sign-flip"`` negates the LSS weights."""
    _FAULTS.add(name)
    try:
        yield
    finally:
        _FAULTS.discard(name)


@dataclass(frozen=True)
class BitSplitPair:
    up: PackedInt4Matrix
    down: PackedInt4Matrix
    s_up: float
    s_down: float
    degenerate: bool = False

    @property
    def n_rows(self) -> int:
        return self.up.rows

    def stacked(self) -> np.ndarray:
        """The 2N x C real matrix ``[s_up * up; s_down * down]``."""
        return np.vstack(
            [self.s_up * self.up.values.astype(np.float64),
             self.s_down * self.down.values.astype(np.float64)]
        )

    def reconstruct(self) -> np.ndarray:
        return self.s_up * self.up.values.astype(np.float64) + self.s_down * self.down.values


@dataclass(frozen=True)
class SampleMask:
    probs: np.ndarray
    draws: np.ndarray
    inv_weights: np.ndarray

    @property
    def sampled_fraction(self) -> float:
        return float(np.mean(self.draws)) if self.draws.size else 0.0


@dataclass(frozen=True)
class Normalization:
    probs: np.ndarray
    iterations: int
    flagged: bool


def _minimax_levels(g):
    peak = float(np.max(np.abs(g))) if g.size else 0.0
    scale = peak / 7.0
    if scale == 0.0:
        # all zero, or subnormal enough that the scale underflows
        return np.zeros(g.shape, dtype=np.int8), 0.0
    return np.clip(np.rint(g / scale), -7, 7).astype(np.int8), scale


def bit_split(g) -> BitSplitPair:
    """Minimax INT4 quantization of ``g`` followed by INT4 quantization of the residual."""
    g = as_dense(g, "g")
    up, s_up = _minimax_levels(g)
    if s_up == 0.0:
        z = pack_int4(up)
        return BitSplitPair(z, z, 0.0, 0.0, degenerate=True)
    residual = g - s_up * up
    down, s_down = _minimax_levels(residual)
    return BitSplitPair(pack_int4(up), pack_int4(down), s_up, s_down)


def bit_split_batched(g) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """:func:`bit_split` applied to every (N, C) slice of a (B, N, C) array.

    Returns ``(up, s_up, down, s_down)`` with int8 level arrays and (B,) scales.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 3:
        raise StructureError("batched gradients must be (B, N, C)")
    if not np.all(np.isfinite(g)):
        raise InputError("g contains NaN or Inf")

    def levels(a):
        peak = np.abs(a).max(axis=(1, 2)) if a[0].size else np.zeros(a.shape[0])
        scale = peak / 7.0
        safe = np.where(scale > 0, scale, 1.0)[:, None, None]
        lv = np.clip(np.rint(a / safe), -7, 7).astype(np.int8)
        return np.where(scale[:, None, None] > 0, lv, 0).astype(np.int8), scale

    up, s_up = levels(g)
    down, s_down = levels(g - s_up[:, None, None] * up)
    return up, s_up, down, s_down


def _check_rows(bs: BitSplitPair, other_rows: int, what: str):
    if bs.n_rows != other_rows:
        raise StructureError(f"gradient has {bs.n_rows} rows but {what} has {other_rows}")


def weight_leverage_scores(bs: BitSplitPair, x_hat: QuantizedTensor) -> np.ndarray:
    """``c_i = ||stacked grad row i|| * ||x_hat row (i mod N)||`` over the 2N rows."""
    _check_rows(bs, x_hat.shape[0], "x_hat")
    xn = row_norms(x_hat.levels)
    return row_norms(bs.stacked()) * np.concatenate([xn, xn])


def activation_leverage_scores(bs: BitSplitPair) -> np.ndarray:
    return row_norms(bs.stacked())


def normalize_probabilities_info(scores, budget: float) -> Normalization:
    """Probabilities proportional to ``scores``, clamped to [0, 1], summing to ``budget``.

    Repeats clamp-then-rescale until no entry exceeds one; every pass
    saturates at least one entry, so it stops within ``budget + 1`` passes.
    When there are at most ``budget`` positive scores they are all kept with
    probability one and any leftover mass is spread over zero-score entries
    (``flagged``).
    """
    c = np.asarray(scores, dtype=np.float64)
    if c.ndim != 1:
        raise StructureError("scores must be a vector")
    if np.any(c < 0) or not np.all(np.isfinite(c)):
        raise InputError("scores must be finite and non-negative")
    n = c.size
    if budget > n:
        raise InfeasibleError(f"budget {budget} exceeds the {n} available rows")
    pos = c > 0
    n_pos = int(pos.sum())
    if n_pos <= budget:
        p = pos.astype(np.float64)
        left = budget - n_pos
        if left > 0:
            p[~pos] = left / (n - n_pos)
        return Normalization(p, 0, left > 0)

    p = c * (budget / c.sum())
    saturated = np.zeros(n, dtype=bool)
    iterations = 0
    cap = 2 * int(np.ceil(budget)) + 1
    while True:
        iterations += 1
        over = p > 1.0
        if not over.any():
            break
        if iterations > cap:
            raise AssertionError("probability normalization did not converge")
        saturated |= over
        p[saturated] = 1.0
        free = pos & ~saturated
        p[free] = c[free] * ((budget - saturated.sum()) / c[free].sum())
    return Normalization(p, iterations, False)


def normalize_probabilities(scores, budget: float) -> np.ndarray:
    return normalize_probabilities_info(scores, budget).probs


def normalize_probabilities_batched(scores, budget: float) -> np.ndarray:
    """Row-wise :func:`normalize_probabilities` for a (B, R) score array."""
    c = np.asarray(scores, dtype=np.float64)
    if c.ndim != 2:
        raise StructureError("batched scores must be a (B, R) array")
    if np.any(c < 0) or not np.all(np.isfinite(c)):
        raise InputError("scores must be finite and non-negative")
    r = c.shape[1]
    if budget > r:
        raise InfeasibleError(f"budget {budget} exceeds the {r} available rows")
    pos = c > 0
    n_pos = pos.sum(axis=1)
    few = n_pos <= budget
    with np.errstate(divide="ignore", invalid="ignore"):
        spill = np.where(n_pos < r, (budget - n_pos) / (r - n_pos), 0.0)
        p = np.where(few[:, None], np.where(pos, 1.0, spill[:, None]),
                     c * (budget / c.sum(axis=1))[:, None])
    many = ~few
    saturated = np.zeros_like(pos)
    for _ in range(2 * int(np.ceil(budget)) + 1):
        over = (p > 1.0) & many[:, None]
        if not over.any():
            return p
        saturated |= over
        free = pos & ~saturated
        scale = (budget - saturated.sum(axis=1)) / np.where(many, (c * free).sum(axis=1), 1.0)
        p = np.where(many[:, None], np.where(saturated, 1.0, c * scale[:, None]), p)
    raise AssertionError("probability normalization did not converge")


def make_rng(seed) -> np.random.Generator:
    """Counter-based Philox generator keyed by an int or a tuple of ints."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def sample_mask(probs, rng_seed) -> SampleMask:
    """Independent Bernoulli(p_i) draws with ``inv_weights = m / p`` (0/0 := 0)."""
    p = np.asarray(probs, dtype=np.float64)
    if np.any(p < 0) or np.any(p > 1):
        raise InputError("probabilities must lie in [0, 1]")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else make_rng(rng_seed)
    draws = rng.random(p.size) < p
    inv = np.zeros_like(p)
    inv[draws] = 1.0 / p[draws]
    return SampleMask(p, draws, inv)


def keep_positive_mask(scores) -> SampleMask:
    """Deterministic fallback: keep exactly the rows with a positive score."""
    keep = np.asarray(scores) > 0
    p = keep.astype(np.float64)
    return SampleMask(p, keep, p.copy())


def full_mask(n_rows: int) -> SampleMask:
    ones = np.ones(n_rows)
    return SampleMask(ones, np.ones(n_rows, dtype=bool), ones.copy())


def build_mask(scores, budget, mode: str, rng_seed) -> SampleMask:
    if mode == "bernoulli":
        return sample_mask(normalize_probabilities(scores, budget), rng_seed)
    if mode == "keep-positive":
        return keep_positive_mask(scores)
    if mode == "exact":
        return full_mask(len(scores))
    raise InputError(f"unknown LSS mode {mode!r}; expected one of {LSS_MODES}")


def apply_faults(inv_weights: np.ndarray) -> np.ndarray:
    """Reweighting factors as actually used (negated under the sign-flip fault)."""
    return -inv_weights if "lss-sign-flip" in _FAULTS else inv_weights


def _weights(mask: SampleMask, n: int) -> tuple[np.ndarray, np.ndarray]:
    if mask.inv_weights.size != 2 * n:
        raise StructureError(f"mask has {mask.inv_weights.size} entries, expected {2 * n}")
    w = apply_faults(mask.inv_weights)
    return w[:n], w[n:]


def lss_weight_grad(bs: BitSplitPair, x_hat: QuantizedTensor, mask: SampleMask) -> np.ndarray:
    """Sampled ``s_up * up.T M_up X + s_down * down.T M_down X`` (C x D).

    ``X`` is the integer matrix of ``x_hat``; rows with a zero mask are
    skipped entirely.
    """
    n = bs.n_rows
    _check_rows(bs, x_hat.shape[0], "x_hat")
    w_up, w_down = _weights(mask, n)
    x = x_hat.levels.astype(np.float64)
    out = np.zeros((bs.up.cols, x.shape[1]))
    for scale, half, w in ((bs.s_up, bs.up, w_up), (bs.s_down, bs.down, w_down)):
        if scale == 0.0:
            continue
        sel = np.flatnonzero(w)
        if sel.size:
            g = half.values[sel].astype(np.float64)
            out += scale * (g.T @ (x[sel] * w[sel, None]))
    return out


def lss_activation_grad(bs: BitSplitPair, w_hat: QuantizedTensor, mask: SampleMask) -> np.ndarray:
    """Sampled ``(s_up * M_up up + s_down * M_down down) @ W`` (N x D)."""
    n = bs.n_rows
    if bs.up.cols != w_hat.shape[0]:
        raise StructureError(f"gradient has {bs.up.cols} cols but w_hat has {w_hat.shape[0]} rows")
    w_up, w_down = _weights(mask, n)
    wq = w_hat.levels.astype(np.float64)
    out = np.zeros((n, wq.shape[1]))
    for scale, half, w in ((bs.s_up, bs.up, w_up), (bs.s_down, bs.down, w_down)):
        if scale == 0.0:
            continue
        sel = np.flatnonzero(w)
        if sel.size:
            g = half.values[sel].astype(np.float64) * w[sel, None]
            out[sel] += scale * (g @ wq)
    return out


def lss_variance_predicted(scores, probs, mode: str = "weight") -> float:
    """Frobenius variance ``sum (1 - p_i) / p_i * c_i**2`` of the sampled product.

    The formula is the same for the weight and activation estimators; only the
    scores differ.
    """
    if mode not in ("weight", "activation"):
        raise InputError(f"mode must be 'weight' or 'activation', got {mode!r}")
    c = np.asarray(scores, dtype=np.float64)
    p = np.asarray(probs, dtype=np.float64)
    if c.shape != p.shape:
        raise StructureError(f"scores {c.shape} vs probs {p.shape}")
    if np.any((p == 0) & (c > 0)):
        raise InfeasibleError("a positive score has zero probability: variance is infinite")
    live = p > 0
    return float(np.sum((1.0 - p[live]) / p[live] * c[live] ** 2))


@dataclass(frozen=True)
class LssResult:
    """Output of one sampled backward product plus what was sampled."""

    value: np.ndarray
    mask: SampleMask
    scores: np.ndarray
    split: BitSplitPair


def lss_mm_weight(grad_y, x_hat: QuantizedTensor, rng_seed, mode: str = "bernoulli",
                  split: BitSplitPair | None = None) -> LssResult:
    """Estimate ``grad_y.T @ X`` (X the integer levels of ``x_hat``).

    ``split`` reuses an existing bit split of ``grad_y``.
    """
    bs = bit_split(grad_y) if split is None else split
    scores = weight_leverage_scores(bs, x_hat)
    mask = build_mask(scores, bs.n_rows, mode, rng_seed)
    return LssResult(lss_weight_grad(bs, x_hat, mask), mask, scores, bs)


def lss_mm_activation(grad_y, w_hat: QuantizedTensor, rng_seed, mode: str = "bernoulli",
                      scores=None, split: BitSplitPair | None = None) -> LssResult:
    """Estimate ``grad_y @ W`` (W the integer levels of ``w_hat``).

    ``scores`` may be passed in to reuse weight-gradient scores instead of
    recomputing activation scores; ``split`` reuses an existing bit split.
    """
    bs = bit_split(grad_y) if split is None else split
    if scores is None:
        scores = activation_leverage_scores(bs)
    mask = build_mask(scores, bs.n_rows, mode, rng_seed)
    return LssResult(lss_activation_grad(bs, w_hat, mask), mask, scores, bs)
