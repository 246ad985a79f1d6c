"""The fifteen acceptance criteria at their stated tolerances and sizes.

Each test prints one ``criterion N PASS|FAIL`` line; the terminal summary
repeats them in order.
"""
import time

import pytest

from int4fqt.harness import checks
from int4fqt.harness.config import RunConfig
from int4fqt.harness.tasks import make_task
from int4fqt.harness.train import train

pytestmark = pytest.mark.slow

# tiny-transformer recipe: D=64, T=16, 2 heads, 2 blocks, fixed seed
TRAIN_CFG = RunConfig(generator="sparse-token-classification", hidden=64, seq_len=16, heads=2,
                      layers=2, steps=2000, seed=0)


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0


def test_01_hadamard_exactness(acceptance):
    (err, norm), secs = timed(checks.hadamard_roundtrip, ks=range(0, 9))
    acceptance.check(1, "Hadamard involution and norm preservation, k=0..8",
                     err < 1e-10 and norm < 1e-10 and secs < 5,
                     f"max|HHx-x|={err:.2e} norm rel={norm:.2e} time={secs:.2f}s")


def test_02_outlier_amortization(acceptance):
    err, _ = timed(checks.outlier_amortization, ks=range(1, 9))
    acceptance.check(2, "one-hot row of magnitude M maps to constant M*2^(-k/2), k=1..8",
                     err < 1e-12, f"max abs deviation={err:.2e} (M=1000)")


def test_03_int4_packing(acceptance):
    bad, secs = timed(checks.packing_roundtrip, random_matrices=200)
    acceptance.check(3, "exhaustive INT4 pack/unpack round trip",
                     bad == 0 and secs < 1, f"mismatches={bad} time={secs:.3f}s")


def test_04_lsq_conformance(acceptance):
    (bad, recon), _ = timed(checks.lsq_conformance, n_scalars=1_000_000)
    acceptance.check(4, "LSQ elementwise oracle equality on 1e6 scalars",
                     bad == 0 and recon <= 0.5, f"mismatches={bad} max in-range error={recon:.7f}*s")


def test_05_hq_mm_oracle(acceptance):
    err, secs = timed(checks.hq_mm_equivalence, instances=200, ks=(0, 2, 5))
    acceptance.check(5, "hq_mm equals dense oracle on 200 instances, k in {0,2,5}",
                     err < 1e-10 and secs < 30, f"max abs err={err:.2e} time={secs:.2f}s")


def test_06_lss_unbiased_exact(acceptance):
    (w, a), _ = timed(checks.lss_enumeration, instances=20)
    acceptance.check(6, "LSS exact enumeration mean equals bit-split product (2N<=12)",
                     w < 1e-10 and a < 1e-10, f"weight={w:.2e} activation={a:.2e}")


def test_07_lss_unbiased_monte_carlo(acceptance):
    (w, a), secs = timed(checks.lss_monte_carlo, two_n=64, trials=100_000)
    acceptance.check(7, "LSS Monte Carlo bias < 4 SE, 2N=64, 1e5 seeds",
                     w < 4 and a < 4 and secs < 180, f"weight z={w:.3f} activation z={a:.3f} time={secs:.1f}s")


def test_08_variance_identity(acceptance):
    (w, a), _ = timed(checks.variance_identity, trials=100_000)
    acceptance.check(8, "empirical variance matches sum (1-p)/p c^2 within 5%",
                     w.rel_err < 0.05 and a.rel_err < 0.05,
                     f"weight {w.empirical:.5g} vs {w.predicted:.5g} (rel {w.rel_err:.4f}); "
                     f"activation {a.empirical:.5g} vs {a.predicted:.5g} (rel {a.rel_err:.4f})")


def test_09_optimality(acceptance):
    (bad, non_strict), _ = timed(checks.optimality, instances=100)
    acceptance.check(9, "p proportional to c beats uniform on 100 instances, strictly when c varies",
                     bad == 0 and non_strict == 0, f"violations={bad} non-strict={non_strict}")


def test_10_budget(acceptance):
    rel, _ = timed(checks.budget, draws=10_000)
    acceptance.check(10, "mean sampled rows within 2% of N over 1e4 draws", rel < 0.02, f"rel err={rel:.4f}")


def test_11_normalization(acceptance):
    (bad, slow), _ = timed(checks.normalization_stress, vectors=10_000)
    acceptance.check(11, "normalization in [0,1], sums to N, <= 2N+1 iterations on 1e4 vectors",
                     bad == 0 and slow == 0, f"range/sum violations={bad} iteration overruns={slow}")


def test_12_ste_gradient(acceptance):
    errs, secs = timed(checks.ste_mlp, d=16)
    worst = max(errs.values())
    acceptance.check(12, "2-layer hq+exact-backward MLP STE grads vs central differences",
                     worst < 1e-4 and secs < 30,
                     " ".join(f"{k}={v:.2e}" for k, v in errs.items()) + f" time={secs:.2f}s")


def test_13_outlier_ablation(acceptance):
    task = make_task(RunConfig(generator="outlier-activation", features=128, outlier_fraction=0.01))
    x = task.inputs.reshape(-1, 128)[:256]
    e = checks.outlier_ablation(x=x, fraction=0.01)
    acceptance.check(13, "forward error ordering HQ < plain LSQ and keep-outliers <= HQ",
                     e["hq"] < e["lsq"] and e["outlier_keep"] <= e["hq"],
                     f"lsq={e['lsq']:.4f} hq={e['hq']:.4f} outlier_keep={e['outlier_keep']:.4f}")


@pytest.fixture(scope="module")
def training_runs():
    t0 = time.perf_counter()
    # the fp-exact baseline is run first and fixes the reference accuracy
    fp = train(TRAIN_CFG.replace(mode="fp-exact"))
    hq = train(TRAIN_CFG.replace(mode="hq+lss"))
    plain = train(TRAIN_CFG.replace(mode="lsq-plain"))
    return fp, hq, plain, time.perf_counter() - t0


def test_14_end_to_end_training(acceptance, training_runs):
    fp, hq, plain, secs = training_runs
    gap = abs(fp.final_accuracy - hq.final_accuracy)
    acceptance.check(14, "hq+lss final train accuracy within 2pp of fp-exact (2000 steps)",
                     not fp.diverged and not hq.diverged and gap <= 0.02 and secs < 600,
                     f"fp-exact={fp.final_accuracy:.4f} hq+lss={hq.final_accuracy:.4f} "
                     f"lsq-plain={plain.final_accuracy:.4f} (record only) gap={100 * gap:.2f}pp "
                     f"time={secs:.0f}s")


def test_15_determinism(acceptance, training_runs):
    _, hq, _, _ = training_runs
    again = train(TRAIN_CFG.replace(mode="hq+lss"))
    same = again.metrics_csv().encode() == hq.metrics_csv().encode()
    acceptance.check(15, "repeating the hq+lss run gives a byte-identical metrics CSV", same,
                     f"{len(hq.rows)} rows, {len(hq.metrics_csv().encode())} bytes")
