"""Quantized linear layer with straight-through gradients.

``QuantLinearLayer`` computes ``Y = X W.T`` with HQ-MM in the forward pass and
bit-split / leverage-score-sampled products in the backward pass.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backward import LSS_MODES, lss_mm_activation, lss_mm_weight
from .exceptions import DegenerateInputError, InputError, StructureError
from .forward import ForwardCache, hq_mm_transformed
from .hadamard import DEFAULT_K_MAX, HadamardConfig, apply_block_hadamard, candidate_ks, select_block_size
from .lsq import StepSize, cold_start_step, minimax_quantize, step_size_gradient
from .tensor import as_dense, mm_exact

MODES = ("fp-exact", "lsq-plain", "hq+lss", "hq+exact-backward", "minimax-backward")


@dataclass
class GradBundle:
    grad_x: np.ndarray
    grad_w: np.ndarray
    grad_s_x: float = 0.0
    grad_s_w: float = 0.0
    # masked type-3 products before the final H rotation
    product_w: np.ndarray | None = field(default=None, repr=False)
    product_x: np.ndarray | None = field(default=None, repr=False)
    sampled_fraction: float = 1.0


@dataclass(frozen=True)
class LayerCache:
    x: np.ndarray
    fwd: ForwardCache | None = None


def _check_mode(mode):
    if mode not in MODES:
        raise InputError(f"unknown quantization mode {mode!r}; expected one of {MODES}")


def _refresh(step: StepSize, xh) -> None:
    try:
        step.value = cold_start_step(xh)
    except DegenerateInputError:
        pass


def _type3_products(fwd: ForwardCache, grad_y, mode, lss_mode, rng_seed, exact_step_grads):
    """``grad_y.T @ X_hat`` and ``grad_y @ W_hat`` (integer operands), plus the
    versions used for the step-size gradients and the sampled fraction."""
    xq = fwd.x_hat.levels
    wq = fwd.w_hat.levels
    frac = 1.0
    if mode in ("hq+exact-backward", "lsq-plain"):
        p_w = mm_exact(grad_y, xq, trans_a=True, trans_b=False)
        p_x = mm_exact(grad_y, wq, trans_a=False, trans_b=False)
    elif mode == "minimax-backward":
        try:
            gq = minimax_quantize(grad_y, 4)
            p_w = gq.scale * mm_exact(gq.levels, xq, trans_a=True, trans_b=False)
            p_x = gq.scale * mm_exact(gq.levels, wq, trans_a=False, trans_b=False)
        except DegenerateInputError:
            p_w = np.zeros((grad_y.shape[1], xq.shape[1]))
            p_x = np.zeros((grad_y.shape[0], wq.shape[1]))
    else:
        rw = lss_mm_weight(grad_y, fwd.x_hat, (*rng_seed, 0), lss_mode)
        ra = lss_mm_activation(grad_y, fwd.w_hat, (*rng_seed, 1), lss_mode, split=rw.split)
        p_w, p_x = rw.value, ra.value
        frac = 0.5 * (rw.mask.sampled_fraction + ra.mask.sampled_fraction)
    if exact_step_grads and mode not in ("hq+exact-backward", "lsq-plain"):
        s_w = mm_exact(grad_y, xq, trans_a=True, trans_b=False)
        s_x = mm_exact(grad_y, wq, trans_a=False, trans_b=False)
    else:
        s_w, s_x = p_w, p_x
    return p_w, p_x, s_w, s_x, frac


def _seed_tuple(rng_seed) -> tuple[int, ...]:
    if isinstance(rng_seed, (tuple, list)):
        return tuple(int(s) for s in rng_seed)
    return (int(rng_seed),)


def quantized_backward(fwd: ForwardCache, grad_y, mode: str = "hq+lss", rng_seed=0,
                       lss_mode: str = "bernoulli", exact_step_grads: bool = False) -> GradBundle:
    """Straight-through gradients of ``Y = s_x s_w X_hat W_hat.T``.

    ``grad_w = s_x * (grad_y.T X_hat * mask_w) H.T`` and
    ``grad_x = s_w * (mask_x * grad_y W_hat) H.T``; step-size gradients use the
    same type-3 products.
    """
    _check_mode(mode)
    if lss_mode not in LSS_MODES:
        raise InputError(f"unknown LSS mode {lss_mode!r}")
    grad_y = as_dense(grad_y, "grad_y")
    n, c = fwd.x_hat.shape[0], fwd.w_hat.shape[0]
    if grad_y.shape != (n, c):
        raise StructureError(f"grad_y is {grad_y.shape}, forward produced {(n, c)}")
    s_x, s_w = fwd.x_hat.scale, fwd.w_hat.scale
    p_w, p_x, up_w, up_x, frac = _type3_products(
        fwd, grad_y, mode, lss_mode, _seed_tuple(rng_seed), exact_step_grads
    )
    masked_w = np.where(fwd.mask_w.bits, p_w, 0.0)
    masked_x = np.where(fwd.mask_x.bits, p_x, 0.0)
    return GradBundle(
        grad_x=s_w * apply_block_hadamard(masked_x, fwd.cfg),
        grad_w=s_x * apply_block_hadamard(masked_w, fwd.cfg),
        grad_s_x=step_size_gradient(s_w * up_x, fwd.delta_x, fwd.delta_x.size),
        grad_s_w=step_size_gradient(s_x * up_w, fwd.delta_w, fwd.delta_w.size),
        product_w=masked_w,
        product_x=masked_x,
        sampled_fraction=frac,
    )


class QuantLinearLayer:
    """Fully quantized ``Y = X W.T`` layer.

    Parameters
    ----------
    weight : (C, D) array
    mode : one of ``MODES``
    k_max : largest Hadamard block exponent considered when the block size
        is selected from the first batch.
    cold_start_steps : optimizer steps during which both step sizes follow the
        ``2 mean|.| / sqrt(7)`` rule instead of being learned.
    lss_mode : ``"bernoulli"``, ``"keep-positive"`` or ``"exact"``.
    hadamard : fixed config; selected lazily when None.
    """

    def __init__(self, weight, mode="hq+lss", k_max=DEFAULT_K_MAX, cold_start_steps=200,
                 lss_mode="bernoulli", hadamard: HadamardConfig | None = None,
                 s_x: StepSize | float | None = None, s_w: StepSize | float | None = None,
                 exact_step_grads=False):
        _check_mode(mode)
        self.weight = as_dense(weight, "weight").copy()
        self.mode = mode
        self.k_max = 0 if mode == "lsq-plain" else k_max
        self.cold_start_steps = cold_start_steps
        self.lss_mode = lss_mode
        self.hadamard = hadamard
        self.exact_step_grads = exact_step_grads
        self.s_x = self._as_step(s_x)
        self.s_w = self._as_step(s_w)
        self._init_steps = s_x is None or s_w is None
        if hadamard is not None and hadamard.dim != self.weight.shape[1]:
            raise StructureError(f"Hadamard dim {hadamard.dim} != in_features {self.weight.shape[1]}")

    def _as_step(self, s):
        if isinstance(s, StepSize):
            return s
        return StepSize(1.0 if s is None else float(s), True, self.cold_start_steps if s is None else 0)

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def reinitialize(self) -> None:
        """Forget the block size and step sizes; both are re-derived on the next forward."""
        self.hadamard = None
        self._init_steps = True

    def _ensure_hadamard(self, x):
        if self.hadamard is not None:
            return
        d = self.in_features
        if not candidate_ks(d, self.k_max):
            raise StructureError(f"no admissible Hadamard block for dim {d}")
        if self.k_max == 0:
            k = 0
        elif self._init_steps or self.s_x.in_cold_start:
            k = select_block_size(x, self.weight, None, None, self.k_max)
        else:
            k = select_block_size(x, self.weight, self.s_x.value, self.s_w.value, self.k_max)
        self.hadamard = HadamardConfig(k, d)

    def forward(self, x) -> tuple[np.ndarray, LayerCache]:
        x = as_dense(x, "x")
        if x.shape[1] != self.in_features:
            raise StructureError(f"x has {x.shape[1]} features, layer expects {self.in_features}")
        if self.mode == "fp-exact":
            return mm_exact(x, self.weight), LayerCache(x)
        self._ensure_hadamard(x)
        xh = apply_block_hadamard(x, self.hadamard)
        wh = apply_block_hadamard(self.weight, self.hadamard)
        if self._init_steps or self.s_x.in_cold_start:
            _refresh(self.s_x, xh)
        if self._init_steps or self.s_w.in_cold_start:
            _refresh(self.s_w, wh)
        self._init_steps = False
        y, fwd = hq_mm_transformed(xh, wh, self.s_x, self.s_w, self.hadamard)
        return y, LayerCache(x, fwd)

    def backward(self, cache: LayerCache, grad_y, rng_seed=0) -> GradBundle:
        grad_y = as_dense(grad_y, "grad_y")
        if self.mode == "fp-exact":
            if grad_y.shape != (cache.x.shape[0], self.out_features):
                raise StructureError(f"grad_y is {grad_y.shape}")
            return GradBundle(
                grad_x=mm_exact(grad_y, self.weight, trans_b=False),
                grad_w=mm_exact(grad_y, cache.x, trans_a=True, trans_b=False),
            )
        if cache.fwd is None:
            raise StructureError("cache was produced by an fp-exact forward")
        return quantized_backward(cache.fwd, grad_y, self.mode, rng_seed, self.lss_mode,
                                  self.exact_step_grads)

    def sgd_step(self, grads: GradBundle, lr: float, lr_step: float | None = None) -> None:
        self.weight -= lr * grads.grad_w
        lr_step = lr if lr_step is None else lr_step
        for step, g in ((self.s_x, grads.grad_s_x), (self.s_w, grads.grad_s_w)):
            step.sgd_update(g, lr_step)
            step.tick()


def layer_forward(layer: QuantLinearLayer, x):
    return layer.forward(x)


def layer_backward(layer: QuantLinearLayer, cache: LayerCache, grad_y, rng_seed=0) -> GradBundle:
    return layer.backward(cache, grad_y, rng_seed)
