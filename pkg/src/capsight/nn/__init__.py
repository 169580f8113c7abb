from capsight.nn.tensor import Parameter, Tensor, no_grad, watch_kinks
from capsight.nn.module import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention
from capsight.nn.gradcheck import grad_check

__all__ = [
    "Tensor",
    "Parameter",
    "no_grad",
    "watch_kinks",
    "Module",
    "Linear",
    "LayerNorm",
    "FeedForward",
    "MultiHeadAttention",
    "grad_check",
]
