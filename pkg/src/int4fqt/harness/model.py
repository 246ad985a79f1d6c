"""Tiny transformer and MLP with hand-written backward passes.

All linear layers and both attention products run through the quantized
kernels; embeddings, LayerNorm, softmax, ReLU and the classifier head stay in
float64.
"""
from __future__ import annotations

import math

import numpy as np

from ..bmm import QuantBMM
from ..layer import GradBundle, QuantLinearLayer
from .config import RunConfig


class DenseLinear:
    """Float ``y = x W.T + b`` used for the input projection and the head."""

    def __init__(self, w: np.ndarray):
        self.w = w
        self.b = np.zeros(w.shape[0])
        self.gw = np.zeros_like(w)
        self.gb = np.zeros_like(self.b)

    def forward(self, x):
        return x @ self.w.T + self.b, x

    def backward(self, x, gy):
        self.gw = gy.T @ x
        self.gb = gy.sum(axis=0)
        return gy @ self.w

    def step(self, lr):
        self.w -= lr * self.gw
        self.b -= lr * self.gb


class LayerNorm:
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = np.ones(dim)
        self.beta = np.zeros(dim)
        self.eps = eps
        self.g_gamma = np.zeros(dim)
        self.g_beta = np.zeros(dim)

    def forward(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(x.var(axis=-1, keepdims=True) + self.eps)
        xhat = (x - mu) * inv
        return self.gamma * xhat + self.beta, (xhat, inv)

    def backward(self, cache, gy):
        xhat, inv = cache
        self.g_gamma = np.sum(gy * xhat, axis=tuple(range(gy.ndim - 1)))
        self.g_beta = np.sum(gy, axis=tuple(range(gy.ndim - 1)))
        d = gy * self.gamma
        n = d.shape[-1]
        return inv / n * (n * d - d.sum(-1, keepdims=True) - xhat * np.sum(d * xhat, -1, keepdims=True))

    def step(self, lr):
        self.gamma -= lr * self.g_gamma
        self.beta -= lr * self.g_beta


class QLinear:
    """Quantized linear layer plus a float bias."""

    def __init__(self, w: np.ndarray, cfg: RunConfig):
        self.core = QuantLinearLayer(w, mode=cfg.mode, k_max=cfg.k_max,
                                     cold_start_steps=cfg.cold_start_steps, lss_mode=cfg.lss_mode)
        self.b = np.zeros(w.shape[0])
        self.grads: GradBundle | None = None
        self.gb = np.zeros_like(self.b)
        # most recent operands, kept for inspection
        self.last_input = None
        self.last_grad_y = None

    def forward(self, x):
        self.last_input = x
        y, cache = self.core.forward(x)
        return y + self.b, cache

    def backward(self, cache, gy, seed):
        self.last_grad_y = gy
        self.grads = self.core.backward(cache, gy, seed)
        self.gb = gy.sum(axis=0)
        return self.grads.grad_x

    def step(self, lr):
        self.core.sgd_step(self.grads, lr)
        self.b -= lr * self.gb

    @property
    def k(self):
        return None if self.core.hadamard is None or self.core.mode == "fp-exact" else self.core.hadamard.k

    @property
    def sampled_fraction(self):
        return self.grads.sampled_fraction if self.grads is not None else 1.0

    def reinitialize(self):
        self.core.reinitialize()


class QBmm:
    def __init__(self, batch: int, dim: int, cfg: RunConfig):
        self.core = QuantBMM(batch, dim, mode=cfg.mode, k_max=cfg.k_max,
                             cold_start_steps=cfg.cold_start_steps, lss_mode=cfg.lss_mode)
        self.grads = None

    def forward(self, a, b):
        return self.core.forward(a, b)

    def backward(self, cache, gt, seed):
        self.grads = self.core.backward(cache, gt, seed)
        return self.grads.grad_q, self.grads.grad_k

    def step(self, lr):
        self.core.sgd_step(self.grads, lr)

    @property
    def k(self):
        return None if self.core.hadamard is None or self.core.mode == "fp-exact" else self.core.hadamard.k

    @property
    def sampled_fraction(self):
        return self.grads.sampled_fraction if self.grads is not None else 1.0

    def reinitialize(self):
        self.core.reinitialize()


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class Block:
    """Pre-LayerNorm transformer block: attention then a 2-layer ReLU MLP."""

    def __init__(self, cfg: RunConfig, rng: np.random.Generator, depth_scale: float):
        d, h = cfg.hidden, cfg.heads
        self.d, self.h, self.dh = d, h, d // h
        self.ln1 = LayerNorm(d)
        self.ln2 = LayerNorm(d)
        self.qkv = QLinear(rng.normal(size=(3 * d, d)) / math.sqrt(d), cfg)
        self.out = QLinear(rng.normal(size=(d, d)) * depth_scale / math.sqrt(d), cfg)
        self.fc1 = QLinear(rng.normal(size=(2 * d, d)) / math.sqrt(d), cfg)
        self.fc2 = QLinear(rng.normal(size=(d, 2 * d)) * depth_scale / math.sqrt(2 * d), cfg)
        self.scores = QBmm(cfg.batch * h, self.dh, cfg)
        self.context = QBmm(cfg.batch * h, cfg.seq_len, cfg)

    def quantized(self):
        return [self.qkv, self.scores, self.context, self.out, self.fc1, self.fc2]

    def forward(self, x):
        s, t, d = x.shape
        h, dh = self.h, self.dh
        a, c_ln1 = self.ln1.forward(x)
        qkv, c_qkv = self.qkv.forward(a.reshape(s * t, d))
        qkv = qkv.reshape(s, t, 3, h, dh).transpose(2, 0, 3, 1, 4).reshape(3, s * h, t, dh)
        q, k, v = qkv
        raw, c_sc = self.scores.forward(q, k)
        p = _softmax(raw / math.sqrt(dh))
        ctx, c_ctx = self.context.forward(p, v.transpose(0, 2, 1))
        ctx = ctx.reshape(s, h, t, dh).transpose(0, 2, 1, 3).reshape(s * t, d)
        o, c_out = self.out.forward(ctx)
        x1 = x + o.reshape(s, t, d)
        b, c_ln2 = self.ln2.forward(x1)
        m, c_fc1 = self.fc1.forward(b.reshape(s * t, d))
        r = np.maximum(m, 0.0)
        f, c_fc2 = self.fc2.forward(r)
        y = x1 + f.reshape(s, t, d)
        return y, (x.shape, c_ln1, c_qkv, c_sc, p, c_ctx, c_out, c_ln2, c_fc1, m, c_fc2)

    def backward(self, cache, gy, seed):
        shape, c_ln1, c_qkv, c_sc, p, c_ctx, c_out, c_ln2, c_fc1, m, c_fc2 = cache
        s, t, d = shape
        h, dh = self.h, self.dh
        g2 = gy.reshape(s * t, d)
        gr = self.fc2.backward(c_fc2, g2, (*seed, 5))
        gm = gr * (m > 0)
        gb = self.fc1.backward(c_fc1, gm, (*seed, 4))
        gx1 = gy + self.ln2.backward(c_ln2, gb.reshape(s, t, d))
        gctx = self.out.backward(c_out, gx1.reshape(s * t, d), (*seed, 3))
        gctx = gctx.reshape(s, t, h, dh).transpose(0, 2, 1, 3).reshape(s * h, t, dh)
        gp, gvt = self.context.backward(c_ctx, gctx, (*seed, 2))
        graw = p * (gp - np.sum(gp * p, axis=-1, keepdims=True)) / math.sqrt(dh)
        gq, gk = self.scores.backward(c_sc, graw, (*seed, 1))
        gqkv = np.stack([gq, gk, gvt.transpose(0, 2, 1)])
        gqkv = gqkv.reshape(3, s, h, t, dh).transpose(1, 3, 0, 2, 4).reshape(s * t, 3 * d)
        ga = self.qkv.backward(c_qkv, gqkv, (*seed, 0))
        return gx1 + self.ln1.backward(c_ln1, ga.reshape(s, t, d))

    def step(self, lr):
        for part in (self.ln1, self.ln2, *self.quantized()):
            part.step(lr)


class TinyTransformer:
    """Input projection + learned positions, ``layers`` blocks, final LayerNorm,
    and a float head reading the first position."""

    def __init__(self, cfg: RunConfig, n_features: int, n_outputs: int, rng: np.random.Generator):
        d = cfg.hidden
        self.embed = DenseLinear(rng.normal(size=(d, n_features)) / math.sqrt(n_features))
        self.pos = 0.1 * rng.normal(size=(cfg.seq_len, d))
        self.g_pos = np.zeros_like(self.pos)
        scale = 1.0 / math.sqrt(2 * cfg.layers)
        self.blocks = [Block(cfg, rng, scale) for _ in range(cfg.layers)]
        self.ln_f = LayerNorm(d)
        self.head = DenseLinear(0.1 * rng.normal(size=(n_outputs, d)) / math.sqrt(d))

    def quantized(self):
        return [q for b in self.blocks for q in b.quantized()]

    def forward(self, x):
        s, t, f = x.shape
        e, c_emb = self.embed.forward(x.reshape(s * t, f))
        hdn = e.reshape(s, t, -1) + self.pos
        caches = []
        for blk in self.blocks:
            hdn, c = blk.forward(hdn)
            caches.append(c)
        z, c_ln = self.ln_f.forward(hdn[:, 0, :])
        out, c_head = self.head.forward(z)
        return out, (x.shape, c_emb, caches, c_ln, c_head)

    def backward(self, cache, gout, seed):
        (s, t, f), c_emb, caches, c_ln, c_head = cache
        gz = self.head.backward(c_head, gout)
        gh = np.zeros((s, t, self.pos.shape[1]))
        gh[:, 0, :] = self.ln_f.backward(c_ln, gz)
        for i in reversed(range(len(self.blocks))):
            gh = self.blocks[i].backward(caches[i], gh, (*seed, i))
        self.g_pos = gh.sum(axis=0)
        self.embed.backward(c_emb, gh.reshape(s * t, -1))

    def step(self, lr):
        self.embed.step(lr)
        self.pos -= lr * self.g_pos
        for blk in self.blocks:
            blk.step(lr)
        self.ln_f.step(lr)
        self.head.step(lr)


class TinyMLP:
    """Flattened input, ``layers`` quantized ReLU layers of width ``hidden``, float head."""

    def __init__(self, cfg: RunConfig, n_features: int, n_outputs: int, rng: np.random.Generator):
        fan_in = cfg.seq_len * n_features
        dims = [fan_in] + [cfg.hidden] * cfg.layers
        self.layers = [QLinear(rng.normal(size=(o, i)) * math.sqrt(2.0 / i), cfg)
                       for i, o in zip(dims[:-1], dims[1:])]
        self.head = DenseLinear(0.1 * rng.normal(size=(n_outputs, cfg.hidden)) / math.sqrt(cfg.hidden))

    def quantized(self):
        return list(self.layers)

    def forward(self, x):
        a = x.reshape(x.shape[0], -1)
        caches = []
        for layer in self.layers:
            y, c = layer.forward(a)
            caches.append((c, y))
            a = np.maximum(y, 0.0)
        out, c_head = self.head.forward(a)
        return out, (caches, c_head)

    def backward(self, cache, gout, seed):
        caches, c_head = cache
        g = self.head.backward(c_head, gout)
        for i in reversed(range(len(self.layers))):
            c, y = caches[i]
            g = self.layers[i].backward(c, g * (y > 0), (*seed, i))

    def step(self, lr):
        for layer in self.layers:
            layer.step(lr)
        self.head.step(lr)


def build_model(cfg: RunConfig, n_features: int, n_outputs: int):
    rng = np.random.default_rng([cfg.seed, 2])
    cls = TinyTransformer if cfg.model == "transformer" else TinyMLP
    return cls(cfg, n_features, n_outputs, rng)
