"""Operator microbenchmarks: median wall time and error against the exact product."""
from __future__ import annotations

import csv
import io
import statistics
import time
from pathlib import Path

import numpy as np

from ..backward import lss_mm_activation, lss_mm_weight
from ..forward import hq_mm
from ..hadamard import HadamardConfig, apply_block_hadamard, select_block_size
from ..lsq import cold_start_step, lsq_quantize
from ..tensor import mm_exact
from .config import RunConfig
from .tasks import outlier_matrix

BENCH_COLUMNS = ("shape", "mode", "median_ns", "rel_frob_err")
BENCH_MODES = ("fp-exact", "lsq-plain", "hq", "lss-weight", "lss-activation")


def _operands(cfg: RunConfig, rng, n, d, c):
    if cfg.generator == "outlier-activation":
        x = outlier_matrix(rng, n, d, cfg.outlier_magnitude, cfg.outlier_fraction)
    else:
        x = rng.normal(size=(n, d))
    w = rng.normal(size=(c, d)) / np.sqrt(d)
    g = rng.normal(size=(n, c)) * rng.exponential(size=(n, 1))
    return x, w, g


def _median_ns(fn, repeats: int) -> int:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        times.append(time.perf_counter_ns() - t0)
    return int(statistics.median(times))


def _rel(approx, exact) -> float:
    denom = np.linalg.norm(exact)
    return float(np.linalg.norm(approx - exact) / denom) if denom > 0 else float(np.linalg.norm(approx))


def bench_shape(cfg: RunConfig, n: int, d: int, c: int, seed: int) -> list[tuple[str, int, float]]:
    """(mode, median_ns, rel_frob_err) for every benchmarked operator on one shape."""
    rng = np.random.default_rng([seed, n, d, c])
    x, w, g = _operands(cfg, rng, n, d, c)
    exact = mm_exact(x, w)
    plain = HadamardConfig(0, d)
    k = select_block_size(x, w, k_max=cfg.k_max)
    hq = HadamardConfig(k, d)
    xh, wh = apply_block_hadamard(x, hq), apply_block_hadamard(w, hq)
    s_x, s_w = cold_start_step(xh), cold_start_step(wh)
    x_hat, _ = lsq_quantize(xh, s_x)
    w_hat, _ = lsq_quantize(wh, s_w)
    # backward references multiply by the integer levels, so the error is the
    # bit-split plus sampling error
    exact_gw = mm_exact(g, x_hat.levels, trans_a=True, trans_b=False)
    exact_gx = mm_exact(g, w_hat.levels, trans_b=False)

    ops = {
        "fp-exact": (lambda: mm_exact(x, w), exact),
        "lsq-plain": (lambda: hq_mm(x, w, cold_start_step(x), cold_start_step(w), plain)[0], exact),
        "hq": (lambda: hq_mm(x, w, s_x, s_w, hq)[0], exact),
        "lss-weight": (lambda: lss_mm_weight(g, x_hat, (seed, 0), cfg.lss_mode).value, exact_gw),
        "lss-activation": (lambda: lss_mm_activation(g, w_hat, (seed, 1), cfg.lss_mode).value, exact_gx),
    }
    rows = []
    for mode in BENCH_MODES:
        fn, ref = ops[mode]
        out = fn()
        rows.append((mode, _median_ns(fn, cfg.repeats), _rel(out, ref)))
    return rows


def run_bench(cfg: RunConfig) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_COLUMNS)
    for n, d, c in cfg.shape_list():
        for mode, ns, err in bench_shape(cfg, n, d, c, cfg.seed):
            w.writerow((f"{n}x{d}x{c}", mode, ns, f"{err:.6g}"))
    return buf.getvalue()


def write_bench(cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "bench.csv"
    path.write_text(run_bench(cfg), encoding="utf-8", newline="")
    return path
