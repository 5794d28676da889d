"""Minimal module system: parameter registration and common layers."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from ..errors import ConfigError
from . import ops
from .tensor import Parameter, Tensor


class Module:
    """Base class tracking child modules and parameters by attribute name."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(
        self, prefix: str = "", _seen: Optional[set] = None
    ) -> Iterator[tuple[str, Parameter]]:
        # modules may be shared (e.g. one teacher behind two injectors);
        # each parameter is reported exactly once, under its first path
        if _seen is None:
            _seen = set()
        for name, param in self._params.items():
            if id(param) in _seen:
                continue
            _seen.add(id(param))
            yield (f"{prefix}{name}", param)
        for name, child in self._modules.items():
            if id(child) in _seen:
                continue
            _seen.add(id(child))
            yield from child.named_parameters(prefix=f"{prefix}{name}.", _seen=_seen)

    def parameters(self) -> Iterator[Parameter]:
        for _, p in self.named_parameters():
            yield p

    def trainable_parameters(self) -> Iterator[Parameter]:
        return (p for p in self.parameters() if not p.frozen)

    def freeze(self) -> None:
        for p in self.parameters():
            p.frozen = True
            p.tensor.requires_grad = False

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    """Ordered container whose children are named by index."""

    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        self._modules[str(len(self._items))] = module
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


# ----------------------------------------------------------------------
# layers


def _he_std(fan_in: int) -> float:
    return float(np.sqrt(2.0 / fan_in))


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        bias: bool = True,
        frozen: bool = False,
        init_std: Optional[float] = None,
    ):
        super().__init__()
        self.stride = stride
        self.padding = padding
        std = init_std if init_std is not None else _he_std(in_channels * kernel_size**2)
        w = rng.normal(0.0, std, (out_channels, in_channels, kernel_size, kernel_size))
        self.weight = Parameter(Tensor(w.astype(np.float32)), frozen=frozen)
        self.bias = (
            Parameter(Tensor(np.zeros(out_channels, dtype=np.float32)), frozen=frozen)
            if bias
            else None
        )

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(
            x,
            self.weight.tensor,
            self.bias.tensor if self.bias is not None else None,
            stride=self.stride,
            padding=self.padding,
        )


class Linear(Module):
    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: np.random.Generator,
        bias: bool = True,
        frozen: bool = False,
        init_std: Optional[float] = None,
    ):
        super().__init__()
        std = init_std if init_std is not None else _he_std(in_features)
        w = rng.normal(0.0, std, (out_features, in_features))
        self.weight = Parameter(Tensor(w.astype(np.float32)), frozen=frozen)
        self.bias = (
            Parameter(Tensor(np.zeros(out_features, dtype=np.float32)), frozen=frozen)
            if bias
            else None
        )

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(
            x, self.weight.tensor, self.bias.tensor if self.bias is not None else None
        )


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, frozen: bool = False):
        super().__init__()
        self.eps = eps
        self.gain = Parameter(Tensor(np.ones(dim, dtype=np.float32)), frozen=frozen)
        self.offset = Parameter(Tensor(np.zeros(dim, dtype=np.float32)), frozen=frozen)

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gain.tensor, self.offset.tensor, eps=self.eps)


class MultiHeadSelfAttention(Module):
    def __init__(
        self,
        dim: int,
        heads: int,
        rng: np.random.Generator,
        frozen: bool = False,
        init_std: float = 0.02,
    ):
        super().__init__()
        if dim % heads != 0:
            raise ConfigError(f"attention heads={heads} must divide dim={dim}")
        self.heads = heads
        self.q = Linear(dim, dim, rng, frozen=frozen, init_std=init_std)
        self.k = Linear(dim, dim, rng, frozen=frozen, init_std=init_std)
        self.v = Linear(dim, dim, rng, frozen=frozen, init_std=init_std)
        self.out = Linear(dim, dim, rng, frozen=frozen, init_std=init_std)

    def forward(self, tokens: Tensor) -> Tensor:
        return ops.multi_head_self_attention(
            tokens,
            self.q.weight.tensor,
            self.q.bias.tensor,
            self.k.weight.tensor,
            self.k.bias.tensor,
            self.v.weight.tensor,
            self.v.bias.tensor,
            self.out.weight.tensor,
            self.out.bias.tensor,
            self.heads,
        )


def assign_parameter_names(module: Module, prefix: str = "") -> None:
    """Write dotted path names onto every Parameter; names must be unique."""
    seen = set()
    for name, param in module.named_parameters(prefix=prefix):
        if name in seen:
            raise ConfigError(f"duplicate parameter name: {name}")
        seen.add(name)
        param.name = name
