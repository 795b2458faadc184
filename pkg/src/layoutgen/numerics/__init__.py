"""Dense float32 tensors, reverse-mode autodiff, layers and Adam."""
from . import functional
from .functional import (
    causal_attention,
    conv2d,
    depth_to_space,
    dropout,
    embedding,
    layer_norm,
    linear,
    mse_loss,
    softmax_cross_entropy,
    space_to_depth,
    straight_through,
    upsample_nearest,
)
from .gradcheck import check_gradients, finite_difference_gradient, relative_error
from .nn import Conv2d, Embedding, LayerNorm, Linear, Module
from .optim import Adam, AdamState, adam_update
from .tensor import (
    Tensor,
    add,
    backward,
    computation_record,
    concat,
    constant,
    div,
    exp,
    gelu,
    leaky_relu,
    log,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    parameter,
    precision,
    relu,
    reshape,
    round_,
    silu,
    square,
    sub,
    sum_,
    tanh,
    transpose,
)
