import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from int4fqt import oracle
from int4fqt.exceptions import ResourceError, StructureError
from int4fqt.hadamard import (
    HadamardConfig,
    apply_block_hadamard,
    block_hadamard_matrix,
    block_size_errors,
    build_hk,
    select_block_size,
)
from int4fqt.lsq import cold_start_step


def test_h0_and_h1():
    assert build_hk(0).tolist() == [[1.0]]
    s = 1 / math.sqrt(2)
    np.testing.assert_allclose(build_hk(1), [[s, s], [s, -s]], rtol=0, atol=1e-16)


def test_first_row_of_h2_is_flat():
    np.testing.assert_allclose(build_hk(2)[0], [0.5] * 4, atol=1e-16)


@pytest.mark.parametrize("k", range(0, 9))
def test_hk_is_symmetric_orthogonal_and_matches_scipy(k):
    h = build_hk(k)
    np.testing.assert_allclose(h @ h, np.eye(1 << k), atol=1e-12)
    assert np.array_equal(h, h.T)
    np.testing.assert_allclose(h, oracle.dense_hadamard(k, 1 << k), atol=1e-15)


def test_build_hk_cap():
    with pytest.raises(ResourceError):
        build_hk(13)


def test_config_validation():
    with pytest.raises(StructureError):
        HadamardConfig(3, 12)
    assert HadamardConfig(2, 12).block == 4


def test_k0_is_identity():
    x = np.random.default_rng(0).normal(size=(3, 5))
    assert np.array_equal(apply_block_hadamard(x, HadamardConfig(0, 5)), x)


@pytest.mark.parametrize("k", range(1, 9))
def test_one_hot_row_becomes_flat(k):
    n = 1 << k
    for i in (0, n - 1):
        row = np.zeros((1, n))
        row[0, i] = 1.0
        out = apply_block_hadamard(row, HadamardConfig(k, n))
        np.testing.assert_allclose(np.abs(out), 2 ** (-k / 2), rtol=0, atol=1e-15)


def test_fast_transform_matches_dense_oracle():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 8))
    out = apply_block_hadamard(x, HadamardConfig(2, 8))
    ref = x @ oracle.dense_hadamard(2, 8)
    assert np.linalg.norm(out - ref) / np.linalg.norm(ref) < 1e-12
    np.testing.assert_allclose(out, x @ block_hadamard_matrix(HadamardConfig(2, 8)), atol=1e-14)


def test_batched_leading_dims():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 5, 16))
    cfg = HadamardConfig(3, 16)
    out = apply_block_hadamard(x, cfg)
    for b in range(3):
        np.testing.assert_allclose(out[b], apply_block_hadamard(x[b], cfg), atol=1e-15)


def test_dim_mismatch():
    with pytest.raises(StructureError):
        apply_block_hadamard(np.ones((2, 8)), HadamardConfig(2, 16))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 8), st.integers(1, 3), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_involution_and_norm_preservation(k, blocks, rows, seed):
    dim = blocks << k
    x = np.random.default_rng(seed).normal(size=(rows, dim))
    cfg = HadamardConfig(k, dim)
    once = apply_block_hadamard(x, cfg)
    assert np.max(np.abs(apply_block_hadamard(once, cfg) - x)) < 1e-10
    np.testing.assert_allclose(np.linalg.norm(once, axis=1), np.linalg.norm(x, axis=1), rtol=1e-10)


@pytest.mark.parametrize("k", [1, 3, 5])
def test_single_outlier_amortized(k):
    m = 123.0
    dim = 4 << k
    row = np.zeros((1, dim))
    row[0, 5] = m
    out = apply_block_hadamard(row, HadamardConfig(k, dim))
    assert np.max(np.abs(out)) == pytest.approx(m * 2 ** (-k / 2), rel=1e-14)


def _oracle_block_errors(x, w, s_x, s_w, ks):
    errs = {}
    for k in ks:
        h = oracle.dense_hadamard(k, x.shape[1])
        sx = cold_start_step(x @ h) if s_x is None else s_x
        sw = cold_start_step(w @ h) if s_w is None else s_w
        lx, _ = oracle.lsq_dense(x @ h, sx)
        lw, _ = oracle.lsq_dense(w @ h, sw)
        errs[k] = np.mean((sx * lx @ h.T - x) ** 2) * np.mean((sw * lw @ h.T - w) ** 2)
    return errs


def test_grid_aligned_inputs_select_k0():
    rng = np.random.default_rng(3)
    x = 0.2 * rng.integers(-7, 8, size=(8, 16))
    w = 0.3 * rng.integers(-7, 8, size=(4, 16))
    assert block_size_errors(x, w, 0.2, 0.3)[0] == 0.0
    assert select_block_size(x, w, 0.2, 0.3, k_max=4) == 0


@pytest.mark.parametrize("steps", [(None, None), (0.4, 0.1)])
def test_outlier_column_selects_positive_k(steps):
    rng = np.random.default_rng(4)
    x = rng.normal(size=(32, 64))
    x[:, 9] *= 100.0
    w = rng.normal(scale=0.2, size=(16, 64))
    ref = _oracle_block_errors(x, w, *steps, range(0, 6))
    k = select_block_size(x, w, *steps, k_max=5)
    assert k > 0
    assert k == min(ref, key=lambda kk: (ref[kk], kk))
    got = block_size_errors(x, w, *steps, k_max=5)
    for kk in ref:
        assert got[kk] == pytest.approx(ref[kk], rel=1e-9)


def test_k_max_zero_returns_zero():
    x = np.random.default_rng(5).normal(size=(4, 8))
    assert select_block_size(x, x, 0.1, 0.1, k_max=0) == 0


def test_empty_candidate_set():
    with pytest.raises(StructureError):
        select_block_size(np.ones((2, 4)), np.ones((2, 4)), 1.0, 1.0, k_max=-1)
