"""Low-rank adapters (delta W = B @ A) on named :class:`~miniweave.nn.Linear` layers."""

from __future__ import annotations

import fnmatch

import numpy as np

from . import tensor as T
from .nn import Linear, Module, Parameter


class LoraConfigError(ValueError):
    pass


class LoraAdapter(Module):
    """Adds ``scale * B(A(dropout(x)))`` to a frozen projection ``W0 x``.

    ``B`` starts at zero so a fresh adapter is an exact no-op.
    """

    def __init__(self, in_features: int, out_features: int, rank: int = 16, scale: float = 1.0,
                 dropout: float = 0.1, target: str = "", seed: int = 0):
        if rank < 1 or rank > min(in_features, out_features) / 2:
            raise LoraConfigError(
                f"rank {rank} must satisfy 1 <= r <= min(d, k)/2 = {min(in_features, out_features) / 2}"
            )
        rng = np.random.default_rng(seed)
        self.A = Parameter(rng.standard_normal((rank, in_features)) / np.sqrt(in_features))
        self.B = Parameter(np.zeros((out_features, rank)))
        self.rank, self.scale, self.dropout, self.target = rank, float(scale), float(dropout), target
        self._rng = np.random.default_rng(seed + 1)

    def delta(self) -> np.ndarray:
        return self.scale * (self.B.data @ self.A.data)

    def __call__(self, x):
        x = T.dropout(x, self.dropout, self._rng, self.training)
        return T.scale(T.linear(T.linear(x, self.A), self.B), self.scale)


def apply(x, weight, adapter: LoraAdapter | None, bias=None):
    """``W0 x (+ b) + scale * B A x`` for an explicit base weight."""
    weight = T.as_tensor(weight)
    if adapter is not None and (adapter.A.shape[1] != weight.shape[1] or adapter.B.shape[0] != weight.shape[0]):
        raise LoraConfigError(f"adapter {adapter.B.shape[0]}x{adapter.A.shape[1]} does not fit weight {weight.shape}")
    out = T.linear(x, weight, bias)
    if adapter is not None:
        out = T.add(out, adapter(x))
    return out


def merge(adapter: LoraAdapter, weight: np.ndarray) -> np.ndarray:
    """Fold the adapter into the base weight: ``W0 + scale * B A``."""
    if weight.shape != (adapter.B.shape[0], adapter.A.shape[1]):
        raise LoraConfigError(f"adapter does not fit weight {weight.shape}")
    return (weight.astype(np.float64) + adapter.delta()).astype(weight.dtype)


def find_linears(model: Module, selector: str) -> dict[str, Linear]:
    hits = {name: mod for name, mod in model.named_modules() if isinstance(mod, Linear) and fnmatch.fnmatchcase(name, selector)}
    if not hits:
        raise LoraConfigError(f"selector {selector!r} matches no linear projection")
    return hits


def attach(model: Module, selector: str, rank: int = 16, scale: float = 1.0, dropout: float = 0.1,
           seed: int = 0) -> dict[str, LoraAdapter]:
    """Attach a fresh adapter to every Linear whose dotted name matches ``selector`` (fnmatch).

    The wrapped base weight and bias are frozen.
    """
    adapters = {}
    for i, (name, lin) in enumerate(sorted(find_linears(model, selector).items())):
        if lin.lora is not None:
            raise LoraConfigError(f"{name} already carries an adapter")
        ad = LoraAdapter(lin.in_features, lin.out_features, rank, scale, dropout, target=name, seed=seed + 7919 * i)
        ad.training = lin.training
        lin.weight.requires_grad = False
        if lin.bias is not None:
            lin.bias.requires_grad = False
        lin.lora = ad
        adapters[name] = ad
    model.assign_names(getattr(model, "name", ""))
    return adapters


def detach(model: Module) -> dict[str, LoraAdapter]:
    """Remove every adapter; the model reverts to its base weights."""
    removed = {}
    for name, mod in list(model.named_modules()):
        if isinstance(mod, Linear) and mod.lora is not None:
            removed[name] = mod.lora
            mod.lora = None
    return removed


def adapters_of(model: Module) -> dict[str, LoraAdapter]:
    return {name: mod.lora for name, mod in model.named_modules() if isinstance(mod, Linear) and mod.lora is not None}
