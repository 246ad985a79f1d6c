"""Deterministic SGD training on the synthetic tasks."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..exceptions import Int4Error
from .config import RunConfig
from .model import build_model
from .tasks import SyntheticTask, make_task

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "loss", "accuracy", "k", "sampled_fraction")


@dataclass
class TrainResult:
    rows: list[tuple] = field(default_factory=list)
    events: list[str] = field(default_factory=list)
    initial_loss: float = math.nan
    final_loss: float = math.nan
    final_accuracy: float = math.nan
    diverged: bool = False
    model: object = field(default=None, repr=False, compare=False)

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        writer.writerows(self.rows)
        return buf.getvalue()

    def summary_csv(self) -> str:
        return (
            "key,value\n"
            f"initial_loss,{_fmt(self.initial_loss)}\n"
            f"final_loss,{_fmt(self.final_loss)}\n"
            f"final_accuracy,{_fmt(self.final_accuracy)}\n"
            f"diverged,{int(self.diverged)}\n"
        )


def _fmt(v: float) -> str:
    return "" if v is None else f"{v:.10g}"


def loss_and_grad(out: np.ndarray, targets: np.ndarray, classification: bool):
    s = out.shape[0]
    if classification:
        z = out - out.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        loss = -float(np.mean(logp[np.arange(s), targets]))
        grad = np.exp(logp)
        grad[np.arange(s), targets] -= 1.0
        acc = float(np.mean(np.argmax(out, axis=1) == targets))
        return loss, grad / s, acc
    diff = out - targets
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size, None


def evaluate(model, task: SyntheticTask, batch: int) -> tuple[float, float | None]:
    """Loss and accuracy over the whole training set, in batch-sized chunks."""
    losses, hits = [], []
    for start in range(0, task.inputs.shape[0], batch):
        out, _ = model.forward(task.inputs[start:start + batch])
        tgt = task.targets[start:start + batch]
        loss, _, _ = loss_and_grad(out, tgt, task.is_classification)
        losses.append(loss)
        if task.is_classification:
            hits.append(np.argmax(out, axis=1) == tgt)
    acc = float(np.mean(np.concatenate(hits))) if hits else None
    return float(np.mean(losses)), acc


def _k_column(model) -> str:
    return ";".join("-" if q.k is None else str(q.k) for q in model.quantized())


def train(cfg: RunConfig, task: SyntheticTask | None = None) -> TrainResult:
    """Run ``cfg.steps`` SGD steps; every random choice derives from ``cfg.seed``."""
    task = make_task(cfg) if task is None else task
    model = build_model(cfg, task.n_features, task.n_outputs)
    order_rng = np.random.default_rng([cfg.seed, 3])
    n = task.inputs.shape[0]
    res = TrainResult(model=model)
    with np.errstate(over="ignore", invalid="ignore"):
        res.initial_loss, _ = evaluate(model, task, cfg.batch)
    # the evaluation pass fixed block and step sizes; training picks its own
    for q in model.quantized():
        q.reinitialize()
    perm = order_rng.permutation(n)
    cursor = 0
    for step in range(cfg.steps):
        if cfg.reselect_step and step == cfg.reselect_step:
            for q in model.quantized():
                q.reinitialize()
            res.events.append(f"step {step}: block sizes and step sizes re-selected")
        if cursor + cfg.batch > n:
            perm, cursor = order_rng.permutation(n), 0
        idx = perm[cursor:cursor + cfg.batch]
        cursor += cfg.batch
        # overflow on the way to a NaN loss is reported as divergence, not as warnings
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                out, cache = model.forward(task.inputs[idx])
                loss, grad, acc = loss_and_grad(out, task.targets[idx], task.is_classification)
                if math.isfinite(loss):
                    model.backward(cache, grad, (cfg.seed, step))
                    model.step(cfg.lr)
            except Int4Error as exc:
                # the quantizers reject non-finite operands
                loss, reason = math.nan, f"numerical failure ({exc})"
            else:
                reason = "loss is not finite"
        if not math.isfinite(loss):
            res.diverged = True
            res.events.append(f"step {step}: {reason}, stopping")
            log.error("divergence at step %d", step)
            break
        fracs = [q.sampled_fraction for q in model.quantized()]
        res.rows.append((
            step,
            f"{loss:.10g}",
            "" if acc is None else f"{acc:.6g}",
            _k_column(model),
            f"{np.mean(fracs) if fracs else 1.0:.6g}",
        ))
        if step == 0 and cfg.mode != "fp-exact":
            res.events.append(f"step 0: block sizes selected ({_k_column(model)})")
        if cfg.mode != "fp-exact" and step + 1 == cfg.cold_start_steps:
            res.events.append(f"step {step + 1}: cold start finished, step sizes now learned")
    if not res.diverged:
        with np.errstate(over="ignore", invalid="ignore"):
            res.final_loss, res.final_accuracy = evaluate(model, task, cfg.batch)
        if not math.isfinite(res.final_loss):
            res.diverged = True
            res.events.append("final evaluation loss is not finite")
    for e in res.events:
        log.info(e)
    return res


def write_outputs(res: TrainResult, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(res.metrics_csv(), encoding="utf-8", newline="")
    (out / "summary.csv").write_text(res.summary_csv(), encoding="utf-8", newline="")
    (out / "events.log").write_text("".join(e + "\n" for e in res.events), encoding="utf-8", newline="")
    return out / "metrics.csv"
