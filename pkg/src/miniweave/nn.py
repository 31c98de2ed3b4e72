"""Minimal parameter containers on top of :mod:`miniweave.tensor`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T


class Parameter(T.Tensor):
    __slots__ = ()

    def __init__(self, data, requires_grad: bool = True):
        super().__init__(np.asarray(data, dtype=T.DEFAULT_DTYPE), requires_grad=requires_grad)


class Module:
    """Attribute-scanning container; names follow attribute paths."""

    training: bool = False
    name: str = ""

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for key, child in self.children():
            yield from child.named_modules(f"{prefix}.{key}" if prefix else key)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield (f"{prefix}.{key}" if prefix else key), value
        for key, child in self.children():
            yield from child.named_parameters(f"{prefix}.{key}" if prefix else key)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self, prefix: str = "") -> None:
        for name, mod in self.named_modules(prefix):
            mod.name = name

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        if strict:
            missing = sorted(set(params) - set(state))
            unexpected = sorted(set(state) - set(params))
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, value in state.items():
            if name in params:
                if params[name].shape != value.shape:
                    raise T.DimensionError(f"{name}: expected {params[name].shape}, got {value.shape}")
                params[name].data = np.array(value, dtype=params[name].dtype)


class Linear(Module):
    """Dense layer, weight (out, in); carries an optional LoRA adapter."""

    def __init__(self, in_features: int, out_features: int, bias: bool = True, rng=None, zero: bool = False):
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / np.sqrt(in_features)
        w = np.zeros((out_features, in_features)) if zero else rng.uniform(-bound, bound, (out_features, in_features))
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_features)) if bias else None
        self.lora = None
        self.in_features, self.out_features = in_features, out_features

    def __call__(self, x):
        out = T.linear(x, self.weight, self.bias)
        if self.lora is not None:
            out = T.add(out, self.lora(x))
        return out


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int = 3, stride: int = 1, rng=None, zero: bool = False):
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / np.sqrt(cin * k * k)
        w = np.zeros((k, k, cin, cout)) if zero else rng.uniform(-bound, bound, (k, k, cin, cout))
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(cout))
        self.stride, self.padding = stride, k // 2

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class GroupNorm(Module):
    def __init__(self, groups: int, channels: int, eps: float = 1e-5):
        self.groups, self.eps = groups, eps
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))

    def __call__(self, x):
        return T.group_norm(x, self.groups, self.weight, self.bias, self.eps)


class LayerNorm(GroupNorm):
    """Per-token normalisation of (..., C) tokens."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__(1, channels, eps)

    def __call__(self, x):
        shape = x.shape
        flat = T.reshape(x, (-1, shape[-1]))
        return T.reshape(T.group_norm(flat, 1, self.weight, self.bias, self.eps), shape)
