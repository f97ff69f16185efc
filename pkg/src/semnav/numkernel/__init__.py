"""Float64 tensors, reverse-mode autodiff and transformer primitives."""
from .kernels import BACKEND
from .nn import (
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    ModuleList,
    MultiHeadAttention,
    Parameter,
    TransformerEncoder,
    TransformerLayer,
)
from .tensor import (
    Tensor,
    add,
    backward,
    concat,
    exp,
    index,
    layernorm,
    log,
    matmul,
    mean,
    no_grad,
    relu,
    sigmoid,
    softmax,
    stack,
    tanh,
    transpose,
)
from .gradcheck import GradCheckReport, grad_check
