"""Minimal reverse-mode tensor engine for rank-4 image tensors."""
from .gradcheck import GradcheckError, GradcheckResult, gradcheck, rel_error
from .ops import (
    ShapeError,
    adaptive_avgpool2d,
    add,
    as_tensor,
    avgpool2d_samesize,
    bce_with_logits,
    channel_layernorm,
    concat_channels,
    conv2d,
    maxpool2d,
    relu,
    sub,
    swish,
    upsample_nearest2x,
    upsample_nearest_to,
)
from .optim import AdamState, adam_step
from .tensor import (
    ParamStore,
    ParamTensor,
    Tensor,
    backward,
    get_dtype,
    grad_enabled,
    no_grad,
    precision,
    set_debug,
    set_precision,
)
