import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from int4fqt import oracle
from int4fqt.backward import (
    BitSplitPair,
    activation_leverage_scores,
    bit_split,
    bit_split_batched,
    build_mask,
    full_mask,
    inject_fault,
    keep_positive_mask,
    lss_activation_grad,
    lss_mm_weight,
    lss_variance_predicted,
    lss_weight_grad,
    normalize_probabilities,
    normalize_probabilities_batched,
    normalize_probabilities_info,
    sample_mask,
    weight_leverage_scores,
)
from int4fqt.exceptions import InfeasibleError, StructureError
from int4fqt.lsq import lsq_quantize
from int4fqt.tensor import QuantizedTensor, pack_int4


def sparse_gradient(rng, n, c, heavy=2, scale=1e-3):
    """Rows mostly near zero with a few large ones, like output gradients late in training."""
    g = rng.normal(scale=scale, size=(n, c))
    rows = rng.choice(n, size=heavy, replace=False)
    g[rows] = rng.normal(size=(heavy, c))
    g[rng.choice(n, size=max(1, n // 4), replace=False)] = 0.0
    return g


def int_tensor(rng, n, d, scale=0.5):
    return QuantizedTensor(pack_int4(rng.integers(-7, 8, size=(n, d))), scale)


# -- bit splitting ---------------------------------------------------------------


def test_bit_split_worked_example():
    g = np.array([[0.70, -0.36, 0.06]])
    bs = bit_split(g)
    assert bs.s_up == pytest.approx(0.1, rel=1e-15)
    assert bs.up.values.tolist() == [[7, -4, 1]]
    assert bs.s_down == pytest.approx(0.04 / 7, rel=1e-12)
    assert bs.down.values.tolist() == [[0, 7, -7]]
    np.testing.assert_allclose(bs.reconstruct(), g, atol=1e-15)


def test_bit_split_grid_aligned_has_no_residual():
    g = np.array([[7.0, -2.0, 3.0, 0.0]])
    bs = bit_split(g)
    assert bs.s_up == 1.0
    assert bs.s_down == 0.0
    assert not bs.down.values.any()


def test_bit_split_zero_is_degenerate():
    bs = bit_split(np.zeros((3, 2)))
    assert bs.degenerate and bs.s_up == 0.0 and bs.s_down == 0.0


def test_bit_split_subnormal_input_is_degenerate():
    bs = bit_split(np.full((2, 2), 1e-323))
    assert bs.degenerate and not bs.up.values.any()
    up, s_up, _, _ = bit_split_batched(np.full((1, 2, 2), 1e-323))
    assert s_up[0] == 0.0 and not up.any()


@given(hnp.arrays(np.float64, (5, 4), elements=st.floats(-1e3, 1e3)))
def test_bit_split_reconstruction_bound(g):
    bs = bit_split(g)
    err = np.max(np.abs(g - bs.reconstruct()))
    assert err <= bs.s_down / 2 * (1 + 1e-9) + 1e-300
    assert bs.s_down <= bs.s_up


# -- leverage scores ---------------------------------------------------------------


def test_weight_scores_direct_product():
    z = pack_int4([[0]])
    bs = BitSplitPair(pack_int4([[2]]), z, 1.0, 0.0)
    scores = weight_leverage_scores(bs, QuantizedTensor(pack_int4([[3]]), 1.0))
    assert scores.tolist() == [6.0, 0.0]


def test_weight_scores_zero_row_and_oracle():
    rng = np.random.default_rng(0)
    g = rng.normal(size=(6, 5))
    g[2] = 0
    bs = bit_split(g)
    xq = int_tensor(rng, 6, 7)
    scores = weight_leverage_scores(bs, xq)
    assert scores[2] == 0 and scores[8] == 0
    stacked = np.vstack([bs.s_up * bs.up.values, bs.s_down * bs.down.values])
    x2 = np.vstack([xq.levels, xq.levels]).astype(float)
    ref = [np.sqrt(sum(v * v for v in stacked[i])) * np.sqrt(sum(v * v for v in x2[i])) for i in range(12)]
    np.testing.assert_allclose(scores, ref, rtol=1e-12)
    with pytest.raises(StructureError):
        weight_leverage_scores(bs, int_tensor(rng, 5, 7))


def test_activation_scores():
    assert not activation_leverage_scores(bit_split(np.zeros((2, 3)))).any()
    bs = bit_split(np.array([[0.0, 7.0, 0.0], [-3.0, 0.0, 0.0]]))
    np.testing.assert_allclose(activation_leverage_scores(bs), [7.0, 3.0, 0.0, 0.0], rtol=1e-12)
    g = np.random.default_rng(1).normal(size=(4, 3))
    bs = bit_split(g)
    ref = np.linalg.norm(np.vstack([bs.s_up * bs.up.values, bs.s_down * bs.down.values]), axis=1)
    np.testing.assert_allclose(activation_leverage_scores(bs), ref, rtol=1e-12)


# -- probabilities -------------------------------------------------------------------


def test_normalization_worked_example():
    info = normalize_probabilities_info([3, 1, 0, 0], 2)
    assert info.probs.tolist() == [1.0, 1.0, 0.0, 0.0]


def test_normalization_multi_pass():
    p = normalize_probabilities([100, 10, 1, 1, 1, 1], 3)
    # after saturating the first two, the remaining mass of 1 spreads evenly
    np.testing.assert_allclose(p, [1, 1, 0.25, 0.25, 0.25, 0.25])


def test_normalization_symmetry_and_exact_keep():
    assert np.allclose(normalize_probabilities(np.ones(8), 4), 0.5)
    assert normalize_probabilities([2, 0, 5, 0], 2).tolist() == [1, 0, 1, 0]


def test_normalization_infeasible_spreads_over_zero_scores():
    info = normalize_probabilities_info([1, 0, 0, 0], 2)
    assert info.flagged
    np.testing.assert_allclose(info.probs, [1, 1 / 3, 1 / 3, 1 / 3])
    with pytest.raises(InfeasibleError):
        normalize_probabilities([1, 1], 3)


score_vectors = st.integers(1, 40).flatmap(
    lambda n: hnp.arrays(
        np.float64,
        2 * n,
        elements=st.one_of(st.just(0.0), st.floats(1e-6, 1e6)),
    )
)


@settings(max_examples=200)
@given(score_vectors)
def test_normalization_properties(scores):
    n = scores.size // 2
    info = normalize_probabilities_info(scores, n)
    p = info.probs
    assert np.all((p >= 0) & (p <= 1))
    assert abs(p.sum() - n) < 1e-6
    assert info.iterations <= 2 * n + 1
    if (scores > 0).sum() >= n:
        assert np.all(p[scores == 0] == 0)


# -- sampling --------------------------------------------------------------------------


def test_sample_mask_deterministic_cases():
    m = sample_mask([1.0, 0.0, 1.0], 7)
    assert m.draws.tolist() == [True, False, True]
    assert m.inv_weights.tolist() == [1.0, 0.0, 1.0]


def test_sample_mask_is_seeded():
    p = np.full(50, 0.5)
    assert np.array_equal(sample_mask(p, (3, 1)).draws, sample_mask(p, (3, 1)).draws)
    assert not np.array_equal(sample_mask(p, (3, 1)).draws, sample_mask(p, (3, 2)).draws)


def test_sample_mask_bernoulli_rate():
    draws = sample_mask(np.full(100_000, 0.5), 11).draws
    assert abs(draws.mean() - 0.5) < 0.01


# -- sampled products ---------------------------------------------------------------------


def test_weight_grad_all_kept_is_exact():
    rng = np.random.default_rng(2)
    bs = bit_split(rng.normal(size=(6, 5)))
    xq = int_tensor(rng, 6, 4)
    out = lss_weight_grad(bs, xq, full_mask(12))
    assert np.array_equal(out, oracle.exact_bs_product(bs, xq))


def test_weight_grad_with_n_nonzero_rows_is_deterministic():
    rng = np.random.default_rng(3)
    g = np.zeros((6, 5))
    g[[0, 4]] = rng.normal(size=(2, 5))
    bs = bit_split(g)
    xq = int_tensor(rng, 6, 4)
    scores = weight_leverage_scores(bs, xq)
    assert (scores > 0).sum() <= 6
    outs = {lss_weight_grad(bs, xq, build_mask(scores, 6, "bernoulli", s)).tobytes() for s in range(20)}
    assert len(outs) == 1
    np.testing.assert_allclose(
        lss_weight_grad(bs, xq, build_mask(scores, 6, "bernoulli", 0)), oracle.exact_bs_product(bs, xq), atol=1e-12
    )


def test_activation_grad_exact_cases():
    rng = np.random.default_rng(4)
    bs = bit_split(rng.normal(size=(5, 3)))
    wq = int_tensor(rng, 3, 8)
    assert np.array_equal(lss_activation_grad(bs, wq, full_mask(10)), oracle.exact_bs_activation_product(bs, wq))
    zero = bit_split(np.zeros((5, 3)))
    assert not lss_activation_grad(zero, wq, sample_mask(np.full(10, 0.5), 0)).any()
    with pytest.raises(StructureError):
        lss_activation_grad(bs, int_tensor(rng, 4, 8), full_mask(10))


def test_keep_positive_mode_is_exact():
    rng = np.random.default_rng(5)
    g = sparse_gradient(rng, 8, 4)
    xq = int_tensor(rng, 8, 6)
    res = lss_mm_weight(g, xq, 0, "keep-positive")
    assert np.array_equal(res.value, oracle.exact_bs_product(res.split, xq))
    assert np.array_equal(res.mask.draws, res.scores > 0)


def _enumeration_case(seed, n=5, c=3, d=4):
    rng = np.random.default_rng(seed)
    g = sparse_gradient(rng, n, c, heavy=2)
    bs = bit_split(g)
    xq = int_tensor(rng, n, d)
    wq = int_tensor(rng, c, d)
    return bs, xq, wq


@pytest.mark.parametrize("seed", range(4))
def test_unbiased_by_enumeration(seed):
    bs, xq, wq = _enumeration_case(seed)
    n = bs.n_rows
    ws = weight_leverage_scores(bs, xq)
    wp = normalize_probabilities(ws, n)
    mean, var = oracle.enumerate_mask_expectation(ws, wp, lambda m: lss_weight_grad(bs, xq, m))
    assert np.max(np.abs(mean - oracle.exact_bs_product(bs, xq))) < 1e-10
    assert var == pytest.approx(lss_variance_predicted(ws, wp, "weight"), rel=1e-9, abs=1e-12)

    ascores = activation_leverage_scores(bs)
    ap = normalize_probabilities(ascores, n)
    mean, _ = oracle.enumerate_mask_expectation(ascores, ap, lambda m: lss_activation_grad(bs, wq, m))
    assert np.max(np.abs(mean - oracle.exact_bs_activation_product(bs, wq))) < 1e-10
    # with W = I the sampled product is the reweighted stacked gradient itself
    eye = QuantizedTensor(pack_int4(np.eye(bs.up.cols, dtype=int)), 1.0)
    _, var = oracle.enumerate_mask_expectation(ascores, ap, lambda m: lss_activation_grad(bs, eye, m))
    assert var == pytest.approx(lss_variance_predicted(ascores, ap, "activation"), rel=1e-9, abs=1e-12)


def test_monte_carlo_unbiased_weight():
    rng = np.random.default_rng(6)
    n = 16
    bs = bit_split(sparse_gradient(rng, n, 4, heavy=4, scale=0.05))
    xq = int_tensor(rng, n, 4)
    p = normalize_probabilities(weight_leverage_scores(bs, xq), n)
    rep = oracle.mc_estimate(lambda s: lss_weight_grad(bs, xq, sample_mask(p, s)), 10_000)
    assert rep.max_bias_z(oracle.exact_bs_product(bs, xq)) < 4


def test_fault_injection_is_detected():
    rng = np.random.default_rng(7)
    n = 8
    bs = bit_split(sparse_gradient(rng, n, 3, heavy=3, scale=0.05))
    xq = int_tensor(rng, n, 3)
    p = normalize_probabilities(weight_leverage_scores(bs, xq), n)
    with inject_fault("lss-sign-flip"):
        rep = oracle.mc_estimate(lambda s: lss_weight_grad(bs, xq, sample_mask(p, s)), 1000)
    assert rep.max_bias_z(oracle.exact_bs_product(bs, xq)) > 4


# -- variance ---------------------------------------------------------------------


def test_predicted_variance_examples():
    assert lss_variance_predicted([3.0, 1.0], [1.0, 1.0]) == 0.0
    assert lss_variance_predicted([1.0, 1.0], [0.5, 0.5]) == 2.0
    assert lss_variance_predicted([0.0, 2.0], [0.0, 1.0]) == 0.0
    with pytest.raises(InfeasibleError):
        lss_variance_predicted([1.0, 1.0], [0.0, 1.0])


def test_predicted_variance_matches_monte_carlo():
    rng = np.random.default_rng(8)
    n = 10
    bs = bit_split(sparse_gradient(rng, n, 3, heavy=5, scale=0.1))
    xq = int_tensor(rng, n, 3)
    scores = weight_leverage_scores(bs, xq)
    p = normalize_probabilities(scores, n)
    rep = oracle.mc_estimate(lambda s: lss_weight_grad(bs, xq, sample_mask(p, s)), 20_000)
    assert rep.variance == pytest.approx(lss_variance_predicted(scores, p), rel=0.05)


@settings(max_examples=100)
@given(st.integers(2, 20), st.integers(0, 2**32 - 1))
def test_proportional_probabilities_beat_uniform(n, seed):
    rng = np.random.default_rng(seed)
    scores = np.abs(rng.standard_cauchy(2 * n))
    scores[rng.random(2 * n) < 0.3] = 0.0
    opt = lss_variance_predicted(scores, normalize_probabilities(scores, n))
    uni = lss_variance_predicted(scores, np.full(2 * n, 0.5))
    assert opt <= uni * (1 + 1e-12)
    if np.ptp(scores) > 0:
        assert opt < uni


def test_keep_positive_mask():
    m = keep_positive_mask([0.0, 2.0, 0.5])
    assert m.draws.tolist() == [False, True, True]
    assert m.inv_weights.tolist() == [0.0, 1.0, 1.0]


# -- batched helpers ----------------------------------------------------------------


@settings(max_examples=50)
@given(st.integers(1, 6), st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_batched_normalization_matches_rows(b, n, seed):
    rng = np.random.default_rng(seed)
    scores = np.abs(rng.standard_cauchy((b, 2 * n)))
    scores[rng.random((b, 2 * n)) < 0.4] = 0.0
    scores[0] = 0.0
    got = normalize_probabilities_batched(scores, n)
    for i in range(b):
        np.testing.assert_allclose(got[i], normalize_probabilities(scores[i], n), rtol=1e-12, atol=1e-15)


def test_batched_bit_split_matches_slices():
    rng = np.random.default_rng(12)
    g = rng.normal(size=(3, 5, 4))
    g[1] = 0.0
    up, s_up, down, s_down = bit_split_batched(g)
    for i in range(3):
        bs = bit_split(g[i])
        assert np.array_equal(up[i], bs.up.values) and np.array_equal(down[i], bs.down.values)
        assert s_up[i] == bs.s_up and s_down[i] == bs.s_down
