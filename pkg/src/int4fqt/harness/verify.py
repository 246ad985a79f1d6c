"""Registered verification suites and the pass/fail report."""
from __future__ import annotations

import contextlib
import csv
import io
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from ..backward import inject_fault
from . import checks
from .config import RunConfig

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("suite", "status", "metric", "threshold", "detail")


@dataclass(frozen=True)
class Suite:
    name: str
    measure: Callable[[int], tuple[float, str]]
    threshold: float
    # "<": metric must be strictly below threshold; "<=" allows equality
    compare: str = "<"

    def passes(self, metric: float) -> bool:
        return metric < self.threshold if self.compare == "<" else metric <= self.threshold


@dataclass(frozen=True)
class SuiteResult:
    name: str
    passed: bool
    metric: float
    threshold: float
    detail: str
    seconds: float


def _hadamard(seed):
    err, norm = checks.hadamard_roundtrip(seed=seed)
    return max(err, norm), f"roundtrip={err:.3g} norm={norm:.3g}"


def _amortization(seed):
    err = checks.outlier_amortization()
    return err, f"max deviation={err:.3g}"


def _packing(seed):
    bad = checks.packing_roundtrip(random_matrices=50, seed=seed)
    return float(bad), f"mismatches={bad}"


def _lsq(seed):
    bad, recon = checks.lsq_conformance(n_scalars=50_000, seed=seed)
    # oracle mismatches dominate; reconstruction must stay within half a step
    return bad + max(0.0, recon - 0.5), f"mismatches={bad} max_recon/s={recon:.6f}"


def _hq_mm(seed):
    err = checks.hq_mm_equivalence(instances=20, seed=seed)
    return err, f"max abs err={err:.3g}"


def _enumeration(seed):
    w, a = checks.lss_enumeration(instances=5, seed=seed)
    return max(w, a), f"weight={w:.3g} activation={a:.3g}"


def _monte_carlo(seed):
    w, a = checks.lss_monte_carlo(trials=10_000, seed=seed)
    return max(w, a), f"weight z={w:.3f} activation z={a:.3f}"


def _variance(seed):
    w, a = checks.variance_identity(trials=20_000, seed=seed)
    return max(w.rel_err, a.rel_err), f"weight rel={w.rel_err:.4f} activation rel={a.rel_err:.4f}"


def _optimality(seed):
    bad, non_strict = checks.optimality(instances=50, seed=seed)
    return float(bad + non_strict), f"violations={bad} non_strict={non_strict}"


def _budget(seed):
    rel = checks.budget(draws=2_000, seed=seed)
    return rel, f"rel err={rel:.4f}"


def _normalization(seed):
    bad, slow = checks.normalization_stress(vectors=1_000, seed=seed)
    return float(bad + slow), f"out_of_range={bad} too_many_iterations={slow}"


def _ste(seed):
    errs = checks.ste_mlp(seed=seed)
    return max(errs.values()), " ".join(f"{k}={v:.3g}" for k, v in errs.items())


def _ablation(seed):
    e = checks.outlier_ablation(seed=seed)
    # positive when either ordering is violated
    margin = max(e["hq"] - e["lsq"] + 1e-12, e["outlier_keep"] - e["hq"])
    return margin, " ".join(f"{k}={v:.4f}" for k, v in e.items())


SUITES: tuple[Suite, ...] = (
    Suite("hadamard-roundtrip", _hadamard, 1e-10),
    Suite("outlier-amortization", _amortization, 1e-12),
    Suite("int4-packing", _packing, 0.0, "<="),
    Suite("lsq-conformance", _lsq, 0.0, "<="),
    Suite("hq-mm-oracle", _hq_mm, 1e-10),
    Suite("lss-unbiased-exact", _enumeration, 1e-10),
    Suite("lss-unbiased-mc", _monte_carlo, 4.0),
    Suite("lss-variance", _variance, 0.05),
    Suite("lss-optimality", _optimality, 0.0, "<="),
    Suite("lss-budget", _budget, 0.02),
    Suite("probability-normalization", _normalization, 0.0, "<="),
    Suite("ste-gradient", _ste, 1e-4),
    Suite("outlier-ablation", _ablation, 0.0, "<="),
)

SUITE_NAMES = tuple(s.name for s in SUITES)


def selected_suites(names: str) -> tuple[Suite, ...]:
    if names.strip() == "all":
        return SUITES
    wanted = [w.strip() for w in names.split(",") if w.strip()]
    unknown = sorted(set(wanted) - set(SUITE_NAMES))
    if unknown:
        raise ValueError(f"unknown suite(s): {', '.join(unknown)}")
    return tuple(s for s in SUITES if s.name in wanted)


def run_suites(cfg: RunConfig) -> list[SuiteResult]:
    fault = inject_fault(cfg.inject_fault) if cfg.inject_fault else contextlib.nullcontext()
    results = []
    with fault:
        for suite in selected_suites(cfg.suites):
            t0 = time.perf_counter()
            try:
                metric, detail = suite.measure(cfg.seed)
                passed = suite.passes(metric)
            except Exception as exc:  # a crashing suite is a failing suite
                metric, detail, passed = float("nan"), f"error: {type(exc).__name__}: {exc}", False
            res = SuiteResult(suite.name, passed, metric, suite.threshold, detail, time.perf_counter() - t0)
            log.info("%s %s (%s)", res.name, "PASS" if passed else "FAIL", detail)
            results.append(res)
    return results


def report_csv(results: list[SuiteResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in results:
        w.writerow((r.name, "pass" if r.passed else "fail", f"{r.metric:.6g}", f"{r.threshold:.6g}", r.detail))
    return buf.getvalue()


def report_text(results: list[SuiteResult]) -> str:
    width = max((len(r.name) for r in results), default=0)
    lines = [f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL'}  {r.detail}  ({r.seconds:.2f}s)" for r in results]
    failed = sum(not r.passed for r in results)
    lines.append(f"{len(results) - failed}/{len(results)} suites passed")
    return "\n".join(lines) + "\n"


def run_verify(cfg: RunConfig, out_dir=None) -> tuple[bool, list[SuiteResult]]:
    """Run the selected suites; write ``verify.csv`` and ``verify.txt`` when ``out_dir`` is given."""
    results = run_suites(cfg)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "verify.csv").write_text(report_csv(results), encoding="utf-8", newline="")
        (out / "verify.txt").write_text(report_text(results), encoding="utf-8", newline="")
    return all(r.passed for r in results), results
