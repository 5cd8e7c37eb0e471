"""Minimal parameter containers and layers on top of :mod:`hssl.autograd`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractError, DimensionError


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, requires_grad: bool = True):
        super().__init__(np.array(data, dtype=np.float32), requires_grad=requires_grad)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal samples truncated to two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(np.float32)


class Module:
    """Base class; parameters and submodules are discovered from attributes."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        seen = set()
        for name, value in vars(self).items():
            yield from _walk(value, prefix + name, seen)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
        return self

    def astype(self, dtype):
        """Cast every parameter in place (e.g. to float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict, strict: bool = True):
        own = dict(self.named_parameters())
        if strict and set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise ContractError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, value in state.items():
            if name not in own:
                continue
            value = np.asarray(value)
            if value.shape != own[name].shape:
                raise DimensionError(f"{name}: expected {own[name].shape}, got {value.shape}")
            own[name].data = value.astype(own[name].dtype, copy=True)


def _walk(value, name, seen):
    if isinstance(value, Parameter):
        if id(value) not in seen:
            seen.add(id(value))
            yield name, value
    elif isinstance(value, Module):
        if id(value) in seen:
            return
        seen.add(id(value))
        for sub, child in vars(value).items():
            yield from _walk(child, f"{name}.{sub}", seen)
    elif isinstance(value, (list, tuple)):
        for i, child in enumerate(value):
            yield from _walk(child, f"{name}.{i}", seen)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(trunc_normal(rng, (in_dim, out_dim)))
        self.bias = Parameter(np.zeros(out_dim)) if bias else None

    def forward(self, x):
        out = ag.matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x):
        return ag.layer_norm(x, self.gamma, self.beta, self.eps)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel_size: int, rng: np.random.Generator,
                 padding: int = 0, stride: int = 1, groups: int = 1, bias: bool = True):
        fan_in = in_ch // groups * kernel_size * kernel_size
        std = np.sqrt(2.0 / fan_in)
        self.weight = Parameter(rng.standard_normal((out_ch, in_ch // groups, kernel_size, kernel_size)) * std)
        self.bias = Parameter(np.zeros(out_ch)) if bias else None
        self.padding = padding
        self.stride = stride
        self.groups = groups

    def forward(self, x):
        return ag.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding, groups=self.groups)


class Mlp(Module):
    """Two-layer channel MLP with GELU."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x):
        return self.fc2(ag.gelu(self.fc1(x)))
