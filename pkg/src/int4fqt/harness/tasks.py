"""Seeded synthetic datasets.

Every generator returns inputs of shape (n, T, F) as float64 plus targets,
so the same models run on every task.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RunConfig


@dataclass(frozen=True)
class SyntheticTask:
    kind: str
    inputs: np.ndarray  # (n, T, F)
    targets: np.ndarray  # (n,) int labels or (n, out) floats
    n_outputs: int

    @property
    def is_classification(self) -> bool:
        return self.targets.ndim == 1

    @property
    def n_features(self) -> int:
        return self.inputs.shape[2]


def outlier_matrix(rng: np.random.Generator, rows: int, cols: int, magnitude: float = 50.0,
                   fraction: float = 0.01) -> np.ndarray:
    """Gaussian activations where ``floor(fraction * cols)`` channels (at least one)
    are scaled by ``magnitude``, so outliers never exceed the stated fraction
    when ``cols >= 1 / fraction``."""
    x = rng.normal(size=(rows, cols))
    n_out = max(1, int(fraction * cols)) if fraction > 0 else 0
    if n_out:
        x[:, rng.choice(cols, size=n_out, replace=False)] *= magnitude
    return x


def sparse_token_classification(cfg: RunConfig, rng: np.random.Generator) -> SyntheticTask:
    """Position 0 is a CLS token; one or more "signal" tokens whose id encodes the label
    are hidden among noise tokens. Only the CLS row feeds the classifier, so the
    upstream gradient is concentrated on a few token rows.
    """
    n, t, v, c = cfg.train_size, cfg.seq_len, cfg.vocab, cfg.classes
    labels = rng.integers(0, c, size=n)
    tokens = rng.integers(c + 1, v, size=(n, t))
    tokens[:, 0] = 0
    for i in range(n):
        pos = rng.choice(np.arange(1, t), size=min(cfg.signal_tokens, t - 1), replace=False)
        tokens[i, pos] = 1 + labels[i]
    if cfg.noise > 0:
        flip = rng.random(n) < cfg.noise
        labels = np.where(flip, rng.integers(0, c, size=n), labels)
    inputs = np.zeros((n, t, v))
    np.put_along_axis(inputs, tokens[..., None], 1.0, axis=2)
    return SyntheticTask("sparse-token-classification", inputs, labels, c)


def dense_regression(cfg: RunConfig, rng: np.random.Generator) -> SyntheticTask:
    n, t, f = cfg.train_size, cfg.seq_len, cfg.features
    inputs = rng.normal(size=(n, t, f))
    teacher = rng.normal(size=(t * f, cfg.classes)) / np.sqrt(t * f)
    targets = inputs.reshape(n, -1) @ teacher + cfg.noise * rng.normal(size=(n, cfg.classes))
    return SyntheticTask("dense-regression", inputs, targets, cfg.classes)


def outlier_activation(cfg: RunConfig, rng: np.random.Generator) -> SyntheticTask:
    """Classification from token-averaged Gaussian features with a few huge channels
    that carry no label information."""
    n, t, f = cfg.train_size, cfg.seq_len, cfg.features
    inputs = outlier_matrix(rng, n * t, f, cfg.outlier_magnitude, cfg.outlier_fraction).reshape(n, t, f)
    big = np.max(np.abs(inputs), axis=(0, 1)) > 10 * np.median(np.abs(inputs))
    teacher = rng.normal(size=(f, cfg.classes))
    teacher[big] = 0.0
    labels = np.argmax(inputs.mean(axis=1) @ teacher, axis=1)
    if cfg.noise > 0:
        flip = rng.random(n) < cfg.noise
        labels = np.where(flip, rng.integers(0, cfg.classes, size=n), labels)
    return SyntheticTask("outlier-activation", inputs, labels, cfg.classes)


GENERATORS = {
    "sparse-token-classification": sparse_token_classification,
    "dense-regression": dense_regression,
    "outlier-activation": outlier_activation,
}


def make_task(cfg: RunConfig, seed: int | None = None) -> SyntheticTask:
    rng = np.random.default_rng([cfg.seed if seed is None else seed, 1])
    return GENERATORS[cfg.generator](cfg, rng)
