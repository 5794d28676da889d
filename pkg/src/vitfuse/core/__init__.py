"""Numeric core: tensors, differentiable ops, modules, gradient checking."""

from . import ops
from .gradcheck import grad_check
from .module import (
    Conv2d,
    LayerNorm,
    Linear,
    Module,
    ModuleList,
    MultiHeadSelfAttention,
    assign_parameter_names,
)
from .tensor import Parameter, Tensor, autograd_off, grad_enabled

__all__ = [
    "ops",
    "grad_check",
    "Conv2d",
    "LayerNorm",
    "Linear",
    "Module",
    "ModuleList",
    "MultiHeadSelfAttention",
    "assign_parameter_names",
    "Parameter",
    "Tensor",
    "autograd_off",
    "grad_enabled",
]
