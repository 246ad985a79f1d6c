"""Distribution dumps for external plotting.

Writes value histograms of a layer input before and after the block Hadamard
transform, per-row norms of the gradient flowing into a layer, the cumulative
share of the largest rows, and the quantized activation as an INT4 dump.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..hadamard import HadamardConfig, apply_block_hadamard, candidate_ks
from ..lsq import cold_start_step, lsq_quantize
from ..tensor import PackedInt4Matrix, row_norms, save_int4
from .config import RunConfig
from .model import build_model
from .tasks import make_task
from .train import loss_and_grad


def histogram(values, bins: int = 128, log_magnitude: bool = False, limit: float | None = None):
    """Counts and edges.

    Linear mode bins over ``[-limit, limit]`` (default ``max|values|``) so a
    symmetric input gives mirrored counts.  Log mode bins ``log10|v|`` over
    the nonzero entries.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if log_magnitude:
        mag = np.abs(v[v != 0])
        if mag.size == 0:
            return np.zeros(bins, dtype=np.int64), np.linspace(0.0, 1.0, bins + 1)
        logs = np.log10(mag)
        lo, hi = float(logs.min()), float(logs.max())
        if hi == lo:
            lo, hi = lo - 0.5, hi + 0.5
        return np.histogram(logs, bins=bins, range=(lo, hi))
    if limit is None:
        limit = float(np.max(np.abs(v))) if v.size else 1.0
    limit = limit or 1.0
    return np.histogram(v, bins=bins, range=(-limit, limit))


def cumulative_share(norms) -> np.ndarray:
    """Share of the total held by the top-1, top-2, ... rows; ends at exactly 1.

    An all-zero input has no ranking, so the share grows uniformly.
    """
    n = np.sort(np.asarray(norms, dtype=np.float64).ravel())[::-1]
    if n.size == 0:
        return n
    cs = np.cumsum(n)
    if cs[-1] == 0:
        return np.arange(1, n.size + 1) / n.size
    share = cs / cs[-1]
    share[-1] = 1.0
    return np.maximum.accumulate(share)


@dataclass
class Inspection:
    k: int
    pre_counts: np.ndarray
    pre_edges: np.ndarray
    post_counts: np.ndarray
    post_edges: np.ndarray
    max_abs_pre: float
    max_abs_post: float
    grad_row_norms: np.ndarray
    top_share: np.ndarray
    quantized: PackedInt4Matrix
    step: float

    def histogram_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("series", "bin", "left", "right", "count"))
        for name, counts, edges in (("pre_hadamard", self.pre_counts, self.pre_edges),
                                    ("post_hadamard", self.post_counts, self.post_edges)):
            for i, c in enumerate(counts):
                w.writerow((name, i, f"{edges[i]:.10g}", f"{edges[i + 1]:.10g}", int(c)))
        return buf.getvalue()

    def grad_norms_csv(self) -> str:
        return "row,norm\n" + "".join(f"{i},{v:.10g}\n" for i, v in enumerate(self.grad_row_norms))

    def top_share_csv(self) -> str:
        return "top_x,share\n" + "".join(f"{i + 1},{v:.10g}\n" for i, v in enumerate(self.top_share))

    def summary_csv(self) -> str:
        return (f"key,value\nk,{self.k}\nmax_abs_pre,{self.max_abs_pre:.10g}\n"
                f"max_abs_post,{self.max_abs_post:.10g}\nstep,{self.step:.10g}\n")


def largest_k(dim: int, k_max: int) -> int:
    return max(candidate_ks(dim, k_max))


def inspect_arrays(x, grad_y, k: int, bins: int = 128, log_magnitude: bool = False) -> Inspection:
    """Histograms and norms for one layer input ``x`` and its upstream gradient."""
    x = np.asarray(x, dtype=np.float64)
    xh = apply_block_hadamard(x, HadamardConfig(k, x.shape[-1]))
    # shared range so both histograms are directly comparable
    limit = float(max(np.max(np.abs(x)), np.max(np.abs(xh)))) if x.size else 1.0
    pre = histogram(x, bins, log_magnitude, limit)
    post = histogram(xh, bins, log_magnitude, limit)
    norms = row_norms(np.asarray(grad_y, dtype=np.float64))
    step = cold_start_step(xh)
    q, _ = lsq_quantize(xh, step)
    return Inspection(
        k=k,
        pre_counts=pre[0], pre_edges=pre[1],
        post_counts=post[0], post_edges=post[1],
        max_abs_pre=float(np.max(np.abs(x))), max_abs_post=float(np.max(np.abs(xh))),
        grad_row_norms=norms,
        top_share=cumulative_share(norms),
        quantized=q.ints,
        step=step,
    )


def inspect_model(cfg: RunConfig) -> Inspection:
    """One forward/backward pass of a fresh model on the first batch.

    Histograms use the input of the first quantized linear layer; gradient
    norms use the upstream gradient of the last one.
    """
    task = make_task(cfg)
    model = build_model(cfg, task.n_features, task.n_outputs)
    batch = task.inputs[: cfg.batch]
    out, cache = model.forward(batch)
    _, grad, _ = loss_and_grad(out, task.targets[: cfg.batch], task.is_classification)
    model.backward(cache, grad, (cfg.seed, 0))
    layers = [q for q in model.quantized() if hasattr(q, "last_input")]
    x = layers[0].last_input
    return inspect_arrays(x, layers[-1].last_grad_y, largest_k(x.shape[-1], cfg.k_max),
                          cfg.bins, cfg.log_magnitude)


def run_inspect(cfg: RunConfig, out_dir) -> Path:
    res = inspect_model(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, text in (("histograms.csv", res.histogram_csv()), ("grad_norms.csv", res.grad_norms_csv()),
                       ("top_share.csv", res.top_share_csv()), ("inspect_summary.csv", res.summary_csv())):
        (out / name).write_text(text, encoding="utf-8", newline="")
    save_int4(res.quantized, out / "activation.int4")
    return out
