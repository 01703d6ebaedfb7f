"""Tiny module system: parameter registration, naming and seeded init."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor

__all__ = ["Module", "Conv2d", "init_weights"]


class Module:
    """Container whose Parameter and Module attributes form a named tree."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self) -> None:
        for name, p in self.named_parameters():
            p.name = name

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"tensor {name!r}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)
            p.zero_grad()

    def zero_all(self) -> None:
        """Set every parameter to zero (used to check residual identities)."""
        for p in self.parameters():
            p.data = np.zeros_like(p.data)


class Conv2d(Module):
    """k x k convolution with zero padding k // 2 (spatial size preserved)."""

    def __init__(self, c_in: int, c_out: int, k: int = 3, bias: bool = True):
        dt = T.default_dtype()
        self.weight = Parameter(np.zeros((c_out, c_in, k, k), dtype=dt), role="weight")
        self.bias = Parameter(np.zeros((1, c_out, 1, 1), dtype=dt), role="bias") if bias else None
        self.k = k

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=1, pad=self.k // 2)


def init_weights(model: Module, seed: int) -> None:
    """He/Kaiming-uniform conv weights, U(-b, b) with b = sqrt(6 / fan_in).

    Biases and peephole weights start at zero. Draws happen in parameter-name
    order from one seeded generator.
    """
    rng = np.random.default_rng(seed)
    for _, p in model.named_parameters():
        if p.role == "weight":
            fan_in = p.shape[1] * p.shape[2] * p.shape[3]
            bound = math.sqrt(6.0 / fan_in)
            p.data = rng.uniform(-bound, bound, size=p.shape).astype(p.dtype)
        else:
            p.data = np.zeros_like(p.data)
        p.zero_grad()
