"""Measurements behind the verification suites and the acceptance tests.

Each function returns raw numbers; callers decide the thresholds.  Every
reference value comes from :mod:`int4fqt.oracle`.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .. import oracle
from ..backward import (
    activation_leverage_scores,
    bit_split,
    lss_activation_grad,
    lss_variance_predicted,
    lss_weight_grad,
    normalize_probabilities,
    normalize_probabilities_info,
    sample_mask,
    weight_leverage_scores,
)
from ..forward import hq_mm
from ..hadamard import HadamardConfig, apply_block_hadamard, block_hadamard_matrix
from ..layer import QuantLinearLayer
from ..lsq import cold_start_step, dequantize, lsq_levels, lsq_quantize, outlier_keep_quantize, reconstruct_outlier_keep
from ..tensor import PackedInt4Matrix, QuantizedTensor, pack_int4, unpack_int4
from .tasks import outlier_matrix


def sparse_gradient(rng: np.random.Generator, n: int, c: int, heavy: int, scale: float = 1e-3) -> np.ndarray:
    """Output gradient where only ``heavy`` rows are large and a quarter are exactly zero."""
    g = rng.normal(scale=scale, size=(n, c))
    g[rng.choice(n, size=heavy, replace=False)] = rng.normal(size=(heavy, c))
    g[rng.choice(n, size=max(1, n // 4), replace=False)] = 0.0
    return g


def _int_tensor(rng, rows, cols, scale=1.0):
    return QuantizedTensor(pack_int4(rng.integers(-7, 8, size=(rows, cols))), scale)


# -- transforms and storage --------------------------------------------------------------


def hadamard_roundtrip(ks=range(0, 9), rows: int = 4, blocks: int = 3, seed: int = 0) -> tuple[float, float]:
    """Worst ``|H(Hx) - x|`` and worst relative row-norm change over ``ks``."""
    rng = np.random.default_rng(seed)
    worst_abs = worst_norm = 0.0
    for k in ks:
        dim = blocks << k
        cfg = HadamardConfig(k, dim)
        x = rng.normal(size=(rows, dim))
        once = apply_block_hadamard(x, cfg)
        worst_abs = max(worst_abs, float(np.max(np.abs(apply_block_hadamard(once, cfg) - x))))
        n0, n1 = np.linalg.norm(x, axis=1), np.linalg.norm(once, axis=1)
        worst_norm = max(worst_norm, float(np.max(np.abs(n1 - n0) / n0)))
    return worst_abs, worst_norm


def outlier_amortization(ks=range(1, 9), magnitude: float = 1000.0) -> float:
    """Worst ``| |e_i H| - M 2^{-k/2} |`` over one-hot rows scaled by ``magnitude``."""
    worst = 0.0
    for k in ks:
        n = 1 << k
        for i in range(n):
            row = np.zeros((1, n))
            row[0, i] = magnitude
            out = apply_block_hadamard(row, HadamardConfig(k, n))
            worst = max(worst, float(np.max(np.abs(np.abs(out) - magnitude * 2.0 ** (-k / 2)))))
    return worst


def packing_roundtrip(random_matrices: int = 200, seed: int = 0) -> int:
    """Number of mismatches over every nibble pair, every byte and random matrices."""
    bad = 0
    for lo, hi in itertools.product(range(-8, 8), repeat=2):
        m = pack_int4([[lo, hi]])
        bad += m.payload[0] != oracle.nibble_encode(lo, hi)
        bad += tuple(unpack_int4(m)[0]) != (lo, hi)
    for byte in range(256):
        bad += tuple(unpack_int4(PackedInt4Matrix(1, 2, bytes([byte])))[0]) != oracle.nibble_decode(byte)
    rng = np.random.default_rng(seed)
    for _ in range(random_matrices):
        v = rng.integers(-8, 8, size=tuple(rng.integers(1, 20, size=2)))
        packed = pack_int4(v)
        again = PackedInt4Matrix(packed.rows, packed.cols, packed.payload)  # decode from bytes
        bad += not np.array_equal(unpack_int4(again), v)
    return int(bad)


def lsq_conformance(n_scalars: int = 1_000_000, seed: int = 0) -> tuple[int, float]:
    """Mismatches against the scalar oracle and worst in-range reconstruction error / s."""
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=4.0, size=n_scalars)
    x[: n_scalars // 10] = np.round(x[: n_scalars // 10] * 2) / 2  # exact ties
    s = 0.5
    levels, mask = lsq_levels(x.reshape(1, -1), s)
    levels, mask = levels.ravel(), mask.ravel()
    mismatches = 0
    for v, lv, m in zip(x.tolist(), levels.tolist(), mask.tolist()):
        ref_l, ref_m = oracle.lsq_scalar(v, s)
        mismatches += (ref_l != lv) or (ref_m != m)
    recon = np.abs(s * levels - x)[mask]
    return mismatches, float(np.max(recon) / s) if recon.size else 0.0


def hq_mm_equivalence(instances: int = 200, ks=(0, 2, 5), seed: int = 0) -> float:
    """Worst ``|hq_mm - oracle|`` over random shapes up to (32, 64, 32)."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        n, c = rng.integers(1, 33, size=2)
        for k in ks:
            d = (1 << k) * int(rng.integers(1, 64 // (1 << k) + 1))
            x = rng.normal(size=(n, d)) * rng.choice([1.0, 10.0])
            w = rng.normal(size=(c, d))
            s_x = cold_start_step(x) * rng.uniform(0.5, 2.0)
            s_w = cold_start_step(w) * rng.uniform(0.5, 2.0)
            y, _ = hq_mm(x, w, s_x, s_w, HadamardConfig(k, d))
            worst = max(worst, float(np.max(np.abs(y - oracle.hq_mm_oracle(x, w, s_x, s_w, k)))))
    return worst


# -- leverage score sampling ---------------------------------------------------------------


def lss_enumeration(instances: int = 20, seed: int = 0) -> tuple[float, float]:
    """Worst enumeration bias of the weight and activation estimators (2N <= 12)."""
    rng = np.random.default_rng(seed)
    worst_w = worst_a = 0.0
    for _ in range(instances):
        n = int(rng.integers(1, 7))
        c, d = (int(v) for v in rng.integers(1, 6, size=2))
        bs = bit_split(sparse_gradient(rng, n, c, heavy=max(1, n // 2)))
        xq, wq = _int_tensor(rng, n, d), _int_tensor(rng, c, d)
        ws = weight_leverage_scores(bs, xq)
        mean, _ = oracle.enumerate_mask_expectation(
            ws, normalize_probabilities(ws, n), lambda m: lss_weight_grad(bs, xq, m))
        worst_w = max(worst_w, float(np.max(np.abs(mean - oracle.exact_bs_product(bs, xq)))))
        ascores = activation_leverage_scores(bs)
        mean, _ = oracle.enumerate_mask_expectation(
            ascores, normalize_probabilities(ascores, n), lambda m: lss_activation_grad(bs, wq, m))
        worst_a = max(worst_a, float(np.max(np.abs(mean - oracle.exact_bs_activation_product(bs, wq)))))
    return worst_w, worst_a


def _mc_instance(seed: int, n: int, c: int, d: int):
    # Dense rows with heavy-tailed norms: all 2N scores are positive, so the
    # budget binds and most rows are genuinely sampled.
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(n, c)) * rng.uniform(0.3, 1.5, size=(n, 1))
    return bit_split(g), _int_tensor(rng, n, d), _int_tensor(rng, c, d)


def lss_monte_carlo(two_n: int = 64, trials: int = 100_000, seed: int = 0, c: int = 4, d: int = 4
                    ) -> tuple[float, float]:
    """Max per-entry ``|mean - exact| / SE`` for the weight and activation estimators."""
    n = two_n // 2
    bs, xq, wq = _mc_instance(seed, n, c, d)
    pw = normalize_probabilities(weight_leverage_scores(bs, xq), n)
    pa = normalize_probabilities(activation_leverage_scores(bs), n)
    rep_w = oracle.mc_estimate(lambda s: lss_weight_grad(bs, xq, sample_mask(pw, (seed, s, 0))), trials)
    rep_a = oracle.mc_estimate(lambda s: lss_activation_grad(bs, wq, sample_mask(pa, (seed, s, 1))), trials)
    return rep_w.max_bias_z(oracle.exact_bs_product(bs, xq)), rep_a.max_bias_z(oracle.exact_bs_activation_product(bs, wq))


@dataclass(frozen=True)
class VarianceCheck:
    empirical: float
    predicted: float

    @property
    def rel_err(self) -> float:
        return abs(self.empirical - self.predicted) / self.predicted


def variance_identity(trials: int = 100_000, n: int = 8, seed: int = 0) -> tuple[VarianceCheck, VarianceCheck]:
    """Empirical Frobenius variance versus ``sum (1 - p)/p c^2``.

    The activation identity concerns the reweighted stacked gradient before the
    product with ``W_hat``, so that side uses ``W_hat = I``.
    """
    rng = np.random.default_rng(seed)
    bs = bit_split(sparse_gradient(rng, n, 3, heavy=n // 2, scale=0.1))
    xq = _int_tensor(rng, n, 3)
    ws = weight_leverage_scores(bs, xq)
    pw = normalize_probabilities(ws, n)
    rep = oracle.mc_estimate(lambda s: lss_weight_grad(bs, xq, sample_mask(pw, (seed, s, 0))), trials)
    weight = VarianceCheck(rep.variance, lss_variance_predicted(ws, pw, "weight"))
    eye = QuantizedTensor(pack_int4(np.eye(3, dtype=int)), 1.0)
    a_scores = activation_leverage_scores(bs)
    pa = normalize_probabilities(a_scores, n)
    rep = oracle.mc_estimate(lambda s: lss_activation_grad(bs, eye, sample_mask(pa, (seed, s, 1))), trials)
    act = VarianceCheck(rep.variance, lss_variance_predicted(a_scores, pa, "activation"))
    return weight, act


def optimality(instances: int = 100, seed: int = 0) -> tuple[int, int]:
    """(violations of opt <= uniform, non-strict cases among non-constant scores)."""
    rng = np.random.default_rng(seed)
    violations = non_strict = 0
    for _ in range(instances):
        n = int(rng.integers(2, 33))
        bs = bit_split(sparse_gradient(rng, n, int(rng.integers(1, 9)), heavy=max(1, n // 8)))
        xq = _int_tensor(rng, n, int(rng.integers(1, 9)))
        c = weight_leverage_scores(bs, xq)
        info = normalize_probabilities_info(c, n)
        opt = lss_variance_predicted(c, info.probs)
        uni = lss_variance_predicted(c, np.full(2 * n, 0.5))
        violations += opt > uni * (1 + 1e-12)
        if np.ptp(c) > 0 and not opt < uni:
            non_strict += 1
    return violations, non_strict


def budget(draws: int = 10_000, n: int = 16, seed: int = 0) -> float:
    """Relative error of the mean kept-row count against the budget N."""
    rng = np.random.default_rng(seed)
    bs = bit_split(rng.normal(size=(n, 4)) * rng.exponential(size=(n, 1)))
    p = normalize_probabilities(weight_leverage_scores(bs, _int_tensor(rng, n, 6)), n)
    counts = [sample_mask(p, (seed, i)).draws.sum() for i in range(draws)]
    return abs(float(np.mean(counts)) - n) / n


def _adversarial_scores(rng, i):
    n = int(rng.integers(1, 40))
    kind = i % 4
    if kind == 0:
        c = np.full(2 * n, 1e-3)
        c[rng.integers(2 * n)] = 1e9
    elif kind == 1:
        c = np.full(2 * n, float(rng.uniform(0.1, 10)))
    elif kind == 2:
        c = np.zeros(2 * n)
        live = rng.choice(2 * n, size=int(rng.integers(1, 2 * n + 1)), replace=False)
        c[live] = rng.exponential(size=live.size)
    else:
        c = np.abs(rng.standard_cauchy(2 * n)) ** 3
    return n, c


def normalization_stress(vectors: int = 10_000, seed: int = 0) -> tuple[int, int]:
    """(vectors violating range/sum, vectors exceeding 2N+1 iterations)."""
    rng = np.random.default_rng(seed)
    bad = slow = 0
    for i in range(vectors):
        n, c = _adversarial_scores(rng, i)
        info = normalize_probabilities_info(c, n)
        p = info.probs
        bad += bool(np.any(p < 0) or np.any(p > 1) or abs(p.sum() - n) > 1e-6)
        slow += info.iterations > 2 * n + 1
    return bad, slow


# -- gradients -------------------------------------------------------------------------------


def _off_grid(rng, shape, s, cfg):
    z = s * (rng.integers(-6, 7, size=shape) + rng.uniform(-0.4, 0.4, size=shape))
    return apply_block_hadamard(z, cfg)


def ste_mlp(seed: int = 0, d: int = 16, n: int = 6, k: int = 2) -> dict[str, float]:
    """Relative error between analytic STE gradients of a 2-layer quantized MLP and
    central differences of the same network with its rounding residuals frozen.

    ``L = sum(y2**2)`` with ``y2 = Q2(tanh(Q1(x)))``.  Layer-1 operands are built
    at least 0.1 steps from any rounding edge.  With frozen residuals the
    surrogate is smooth except at the clamp, so the hidden activations only
    need to stay 0.05 steps away from it.
    """
    cfg = HadamardConfig(k, d)
    h = block_hadamard_matrix(cfg)
    s1x, s1w, s2w = 0.25, 0.04, 0.04
    for attempt in range(200):
        rng = np.random.default_rng([seed, attempt])
        x = _off_grid(rng, (n, d), s1x, cfg)
        w1 = _off_grid(rng, (d, d), s1w, cfg)
        w2 = _off_grid(rng, (d, d), s2w, cfg)
        l1 = QuantLinearLayer(w1, mode="hq+exact-backward", hadamard=cfg, s_x=s1x, s_w=s1w)
        y1, c1 = l1.forward(x)
        a = np.tanh(y1)
        s2x = cold_start_step(a @ h)
        if np.min(np.abs(np.abs(a @ h / s2x) - 7)) >= 0.05:
            break
    else:
        raise RuntimeError("no off-boundary instance found")
    l2 = QuantLinearLayer(w2, mode="hq+exact-backward", hadamard=cfg, s_x=s2x, s_w=s2w)
    y2, c2 = l2.forward(a)
    g2 = l2.backward(c2, 2 * y2)
    g1 = l1.backward(c1, g2.grad_x * (1 - a * a))

    r1x, r1w = oracle.rounding_residual(x @ h, s1x), oracle.rounding_residual(w1 @ h, s1w)
    r2x, r2w = oracle.rounding_residual(a @ h, s2x), oracle.rounding_residual(w2 @ h, s2w)

    def loss(xv, w1v, w2v):
        hid = np.tanh(oracle.ste_linear(xv, w1v, s1x, s1w, h, r1x, r1w))
        return float(np.sum(oracle.ste_linear(hid, w2v, s2x, s2w, h, r2x, r2w) ** 2))

    base = loss(x, w1, w2)
    if abs(base - float(np.sum(y2 ** 2))) > 1e-9 * max(1.0, base):
        raise AssertionError("frozen-residual network does not reproduce the quantized forward")

    def rel(analytic, numeric):
        return float(np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric))

    return {
        "grad_x": rel(g1.grad_x, oracle.finite_diff_grad(lambda p: loss(p, w1, w2), x)),
        "grad_w1": rel(g1.grad_w, oracle.finite_diff_grad(lambda p: loss(x, p, w2), w1)),
        "grad_w2": rel(g2.grad_w, oracle.finite_diff_grad(lambda p: loss(x, w1, p), w2)),
    }


# -- outlier suppression ---------------------------------------------------------------------


def outlier_ablation(seed: int = 0, n: int = 64, d: int = 128, c: int = 32, k: int = 5,
                     magnitude: float = 50.0, fraction: float = 0.01, x=None) -> dict[str, float]:
    """Forward relative Frobenius error of plain LSQ, HQ and outlier-keeping LSQ.

    ``x`` defaults to an ``n x d`` outlier matrix; when given, ``d`` is its width.
    """
    rng = np.random.default_rng(seed)
    if x is None:
        x = outlier_matrix(rng, n, d, magnitude, fraction)
    d = x.shape[1]
    w = rng.normal(scale=1.0 / math.sqrt(d), size=(c, d))
    exact = x @ w.T
    s_w = cold_start_step(w)
    qw, _ = lsq_quantize(w, s_w)

    def rel(y):
        return float(np.linalg.norm(y - exact) / np.linalg.norm(exact))

    plain, _ = hq_mm(x, w, cold_start_step(x), s_w, HadamardConfig(0, d))
    cfg = HadamardConfig(k, d)
    hq, _ = hq_mm(x, w, cold_start_step(apply_block_hadamard(x, cfg)),
                  cold_start_step(apply_block_hadamard(w, cfg)), cfg)
    q, kept = outlier_keep_quantize(x, fraction)
    keep = reconstruct_outlier_keep(q, kept) @ dequantize(qw).T
    return {"lsq": rel(plain), "hq": rel(hq), "outlier_keep": rel(keep)}
