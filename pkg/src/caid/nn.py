"""Parameter containers and standard layers built on :mod:`caid.tensor`."""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as T
from .rng import Stream
from .tensor import Tensor


class Module:
    """Minimal module tree with named parameters and buffers."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, m in self._modules.items():
            yield from m.named_buffers(f"{prefix}{name}.")

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for name, p in self.named_parameters():
            out[name] = p.data
        for name, b in self.named_buffers():
            out[name] = b
        return out

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        own = {}
        for name, p in self.named_parameters():
            own[name] = p.data
        for name, b in self.named_buffers():
            own[name] = b
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, arr in state.items():
            if name not in own:
                continue
            if own[name].shape != np.shape(arr):
                raise T.ShapeError("load_state_dict", own[name].shape, np.shape(arr), detail=name)
            own[name][...] = arr

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for m in self._modules.values():
            m.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast parameters and buffers in place (used for 64-bit gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        for m in self.modules():
            for name, b in list(m._buffers.items()):
                m.register_buffer(name, b.astype(dtype))
        return self

    def modules(self) -> Iterator["Module"]:
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def kaiming_uniform(rng: Stream, shape: tuple, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(int(np.prod(shape)), -bound, bound).reshape(shape).astype(np.float32)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: Stream, stride: int = 1, bias: bool = False):
        super().__init__()
        self.stride = stride
        self.padding = k // 2
        self.weight = T.parameter(kaiming_uniform(rng, (cout, cin, k, k), cin * k * k))
        self.bias = T.parameter(np.zeros(cout, np.float32)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, cin: int, cout: int, rng: Stream, bias: bool = True):
        super().__init__()
        self.weight = T.parameter(kaiming_uniform(rng, (cout, cin), cin))
        bound = 1.0 / math.sqrt(cin)
        self.bias = T.parameter(rng.uniform(cout, -bound, bound).astype(np.float32)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class BatchNorm(Module):
    """Batch norm for (N, C) or (N, C, H, W) inputs; running-stat momentum 0.1."""

    momentum = 0.1

    def __init__(self, channels: int, zero_init: bool = False):
        super().__init__()
        self.weight = T.parameter(np.zeros(channels) if zero_init else np.ones(channels))
        self.bias = T.parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels, np.float32))
        self.register_buffer("running_var", np.ones(channels, np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm(
            x, self.weight, self.bias, self.running_mean, self.running_var, self.training, self.momentum
        )


class Sequential(Module):
    def __init__(self, *layers):
        super().__init__()
        self.layers = list(layers)
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class ReLU(Module):
    def forward(self, x):
        return T.relu(x)


def norm_parameter_ids(module: Module) -> set[int]:
    """ids of batch-norm scale/shift tensors, which are exempt from weight decay."""
    return {id(p) for m in module.modules() if isinstance(m, BatchNorm) for p in m.parameters()}
