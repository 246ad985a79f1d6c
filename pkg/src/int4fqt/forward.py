"""Hadamard-quantized forward matrix multiplication."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import StructureError
from .hadamard import HadamardConfig, apply_block_hadamard
from .lsq import ClampMask, _step, lsq_levels, lsq_quantize
from .tensor import QuantizedTensor, as_dense, mm_exact, unpack_int4


@dataclass(frozen=True)
class ForwardCache:
    """Everything the backward pass needs from one forward call.

    ``delta_x``/``delta_w`` are the per-element step-size derivatives of the
    transformed operands, kept so backward never re-transforms X or W.
    """

    x_hat: QuantizedTensor
    w_hat: QuantizedTensor
    mask_x: ClampMask
    mask_w: ClampMask
    cfg: HadamardConfig
    delta_x: np.ndarray
    delta_w: np.ndarray


def _check_shapes(x, w, cfg):
    if x.shape[1] != w.shape[1]:
        raise StructureError(f"x is {x.shape} but w is {w.shape}")
    if cfg.dim != x.shape[1]:
        raise StructureError(f"Hadamard dim {cfg.dim} != inner dim {x.shape[1]}")


def hq_mm(x, w, s_x, s_w, cfg: HadamardConfig) -> tuple[np.ndarray, ForwardCache]:
    """``Y ~ s_x * s_w * round(XH) @ round(WH).T`` with an exact integer product."""
    x = as_dense(x, "x")
    w = as_dense(w, "w")
    _check_shapes(x, w, cfg)
    return hq_mm_transformed(apply_block_hadamard(x, cfg), apply_block_hadamard(w, cfg),
                             s_x, s_w, cfg)


def hq_mm_transformed(xh, wh, s_x, s_w, cfg: HadamardConfig) -> tuple[np.ndarray, ForwardCache]:
    """Quantize already-transformed operands ``XH``/``WH`` and multiply."""
    x_hat, mask_x = lsq_quantize(xh, s_x)
    w_hat, mask_w = lsq_quantize(wh, s_w)
    acc = mm_exact(unpack_int4(x_hat.ints), unpack_int4(w_hat.ints))
    y = (x_hat.scale * w_hat.scale) * acc
    cache = ForwardCache(
        x_hat=x_hat,
        w_hat=w_hat,
        mask_x=mask_x,
        mask_w=mask_w,
        cfg=cfg,
        delta_x=x_hat.levels - np.where(mask_x.bits, xh / x_hat.scale, 0.0),
        delta_w=w_hat.levels - np.where(mask_w.bits, wh / w_hat.scale, 0.0),
    )
    return y, cache


def hq_mm_wide(x, w, s_x, s_w, cfg: HadamardConfig, qp: int = 7) -> np.ndarray:
    """Forward output on a symmetric ``[-qp, qp]`` grid, for error-vs-width studies."""
    x = as_dense(x, "x")
    w = as_dense(w, "w")
    _check_shapes(x, w, cfg)
    lx, _ = lsq_levels(apply_block_hadamard(x, cfg), s_x, qp, qp)
    lw, _ = lsq_levels(apply_block_hadamard(w, cfg), s_w, qp, qp)
    return _step(s_x) * _step(s_w) * mm_exact(lx.astype(np.int64), lw.astype(np.int64))
