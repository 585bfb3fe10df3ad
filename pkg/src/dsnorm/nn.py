"""Light module system: parameter/buffer registration, train/eval state,
and the per-call context threaded through model forwards.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor


@dataclass
class ForwardContext:
    """Per-forward options routed down to every layer.

    domain    -- identifier used to pick the branch of domain-specific banks
    branch    -- force every bank to this branch index (inference over all
                 branches of an unseen-domain sample)
    select_fn -- distance over channel statistics; when set, each bank picks
                 the branch minimizing it and appends the index to `selected`
    rng       -- generator for stochastic layers in training mode
    trace     -- when not None, each normalization layer appends the channel
                 statistics of its incoming features (single instance only)
    """

    domain: str | None = None
    branch: int | None = None
    select_fn: Callable | None = None
    rng: np.random.Generator | None = None
    trace: list | None = None
    selected: list[int] | None = None

    def child(self) -> "ForwardContext":
        """Context for nested sub-layers: same routing, no trace recording."""
        return ForwardContext(
            domain=self.domain,
            branch=self.branch,
            select_fn=self.select_fn,
            rng=self.rng,
            trace=None,
            selected=None,
        )


class Module:
    """Base class tracking parameters, buffers, and training mode.

    Child modules, parameters, and lists of either are discovered from
    instance attributes in definition order, which keeps parameter walks
    and checkpoints deterministic.
    """

    def __init__(self):
        self.training = True
        self._buffers: dict[str, np.ndarray] = {}

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def _components(self):
        for name, value in vars(self).items():
            if name.startswith("_") or name == "training":
                continue
            if isinstance(value, (Module, Parameter)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Module, Parameter)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = ""):
        for name, value in self._components():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            else:
                yield from value.named_parameters(f"{full}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name, value in self._buffers.items():
            yield f"{prefix}{name}", value
        for name, value in self._components():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def modules(self):
        yield self
        for _, value in self._components():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self) -> "Module":
        for m in self.modules():
            m.training = True
        return self

    def eval(self) -> "Module":
        for m in self.modules():
            m.training = False
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def uniform_fan_in(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv1d(Module):
    """1D cross-correlation layer; fan-in uniform weights, zero bias."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, padding: int = 0, *, rng: np.random.Generator):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.weight = Parameter(
            uniform_fan_in(rng, (out_channels, in_channels, kernel_size),
                           in_channels * kernel_size)
        )
        self.bias = Parameter(np.zeros(out_channels))

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv1d(x, self.weight, self.bias, stride=self.stride,
                         padding=self.padding)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, *, rng: np.random.Generator):
        super().__init__()
        self.weight = Parameter(
            uniform_fan_in(rng, (out_features, in_features), in_features)
        )
        self.bias = Parameter(np.zeros(out_features))

    def forward(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)
