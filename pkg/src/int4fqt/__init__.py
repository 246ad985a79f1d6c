"""Simulated INT4 fully quantized training operators.

Forward products use a Hadamard quantizer (HQ-MM); backward products use bit
splitting with leverage score sampling (LSS-MM).  Integer products are
exact; everything else is double precision.
"""
from .backward import (
    BitSplitPair,
    SampleMask,
    activation_leverage_scores,
    bit_split,
    lss_activation_grad,
    lss_variance_predicted,
    lss_weight_grad,
    normalize_probabilities,
    sample_mask,
    weight_leverage_scores,
)
from .exceptions import (
    DegenerateInputError,
    InfeasibleError,
    InputError,
    Int4Error,
    RangeError,
    ResourceError,
    StructureError,
)
from .forward import ForwardCache, hq_mm
from .hadamard import HadamardConfig, apply_block_hadamard, build_hk, select_block_size
from .bmm import BmmCache, BmmGrads, QuantBMM, bmm_backward, bmm_forward
from .layer import GradBundle, QuantLinearLayer, layer_backward, layer_forward
from .lsq import (
    ClampMask,
    StepSize,
    cold_start_step,
    dequantize,
    lsq_delta,
    lsq_quantize,
    minimax_quantize,
    outlier_keep_quantize,
    step_size_gradient,
)
from .tensor import (
    PackedInt4Matrix,
    QuantizedTensor,
    bmm_exact,
    mm_exact,
    pack_int4,
    row_norms,
    unpack_int4,
)

__version__ = "0.1.0"
