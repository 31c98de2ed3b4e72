"""Inference-time attention control: caching, cross-attention swap, self-attention blending."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .unet import CROSS, SELF, ControlError


@dataclass
class ControlPolicy:
    """When and how the conditional branch is steered during editing.

    ``start``/``end`` are inclusive sampling-step indices (step 0 is the
    noisiest); ``swap_positions`` and ``blend_positions`` are token positions in
    the target and source prompts respectively; ``alignment[j]`` is the source
    position whose cached map feeds target position ``j`` (-1 keeps it live).
    """

    steps: int = 50
    start: int = 0
    end: int | None = None
    tau: float = 0.3
    alignment: list | None = None
    blend_positions: tuple = ()
    cross_swap: bool = True
    self_blend: bool = True

    def __post_init__(self):
        if self.end is None:
            self.end = int(0.7 * self.steps)
        if not (0 <= self.start <= self.end <= self.steps):
            raise ControlError(f"control interval [{self.start}, {self.end}] outside [0, {self.steps}]")
        if self.alignment is not None:
            used = [a for a in self.alignment if a >= 0]
            if len(used) != len(set(used)):
                raise ControlError("alignment must be injective over mapped tokens")

    def active(self, step: int) -> bool:
        return self.start <= step <= self.end

    @classmethod
    def word_swap(cls, source_ids, target_ids, steps: int = 50, **kw) -> "ControlPolicy":
        """Policy for prompts of equal length differing in the swapped word(s)."""
        if len(source_ids) != len(target_ids):
            raise ControlError("word swap needs prompts of equal padded length")
        changed = tuple(i for i, (a, b) in enumerate(zip(source_ids, target_ids)) if a != b)
        return cls(steps=steps, alignment=list(range(len(target_ids))), blend_positions=changed, **kw)


def cross_attention_swap(live: np.ndarray, source: np.ndarray, alignment=None) -> np.ndarray:
    """Word-swap injection of cached source cross-attention columns.

    Target column ``j`` takes source column ``alignment[j]``; columns mapped to -1
    stay live. Rows are renormalised when live and cached columns mix.
    """
    live = np.asarray(live)
    source = np.asarray(source)
    if alignment is None:
        if live.shape != source.shape:
            raise ControlError(f"prompt lengths differ ({live.shape[-1]} vs {source.shape[-1]}) and no alignment given")
        alignment = list(range(live.shape[-1]))
    if len(alignment) != live.shape[-1] or live.shape[:-1] != source.shape[:-1]:
        raise ControlError(f"alignment/matrix shapes disagree: {len(alignment)}, {live.shape}, {source.shape}")
    alignment = np.asarray(alignment)
    if np.all(alignment >= 0) and np.array_equal(alignment, np.arange(source.shape[-1])):
        return source.copy()
    out = live.copy()
    mapped = alignment >= 0
    out[..., mapped] = source[..., alignment[mapped]]
    return out / out.sum(axis=-1, keepdims=True)


def blend_mask(source_cross: np.ndarray, positions, tau: float = 0.3) -> np.ndarray:
    """Binary spatial mask where the edited words' averaged source attention reaches ``tau * max``.

    ``source_cross`` is (F, heads, N, L) or an already-averaged (N,) / (N, L) map.
    """
    a = np.asarray(source_cross, dtype=np.float64)
    if a.ndim == 4:
        a = a.mean(axis=(0, 1))
    if a.ndim == 2:
        if not len(positions):
            return np.zeros(a.shape[0])
        a = a[:, list(positions)].mean(axis=-1)
    peak = a.max()
    return (a >= tau * peak).astype(np.float64)


def self_attention_blend(source: np.ndarray, live: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row splice: query rows outside the mask take cached source rows, rows inside stay live."""
    source, live = np.asarray(source), np.asarray(live)
    if source.shape != live.shape:
        raise ControlError(f"self-attention shapes differ: {source.shape} vs {live.shape}")
    keep = np.asarray(mask, dtype=bool)
    if keep.shape != (live.shape[-2],):
        raise ControlError(f"mask of {keep.shape} does not match {live.shape[-2]} query rows")
    return np.where(keep[:, None], live, source)


class AttentionRecord:
    """Source-prompt attention per sampling step, captured during inversion.

    In cached mode the probability matrices of steps inside the control interval
    are stored. In memory-saving mode only the inversion latents are kept and
    matrices are recomputed on demand through ``recompute``.
    """

    def __init__(self, policy: ControlPolicy, memory_saving: bool = False):
        self.policy = policy
        self.memory_saving = memory_saving
        self.matrices: dict[int, dict[str, np.ndarray]] = {}
        self.latents: list[np.ndarray] | None = None
        self.unet = None
        self.cond = None
        self.timesteps: list[int] | None = None

    def wants(self, step: int) -> bool:
        return not self.memory_saving and self.policy.active(step)

    def put(self, step: int, store: dict) -> None:
        self.matrices[step] = {name: np.array(p.data if isinstance(p, T.Tensor) else p) for name, p in store.items()}

    def put_latents(self, latents) -> None:
        if self.memory_saving:
            self.latents = [np.array(z) for z in latents]

    def bind(self, unet, cond, timesteps) -> "AttentionRecord":
        self.unet, self.cond, self.timesteps = unet, cond, list(timesteps)
        return self

    def get(self, step: int) -> dict[str, np.ndarray]:
        if not self.memory_saving:
            if step not in self.matrices:
                raise ControlError(f"no cached attention for step {step}")
            return self.matrices[step]
        return self.recompute(step)

    def recompute(self, step: int) -> dict[str, np.ndarray]:
        """Recalculate the step's matrices from the stored source latent."""
        if self.latents is None or not (0 <= step < len(self.latents)):
            raise ControlError(f"no stored source latent for step {step}")
        if self.unet is None:
            raise ControlError("record is not bound to a model and source prompt")
        idx = len(self.latents) - 1 - step
        prev = self.unet.ctx.controller
        self.unet.ctx.controller = None
        try:
            with T.no_grad():
                _, store = self.unet.predict_noise(T.Tensor(self.latents[idx]), self.timesteps[idx], self.cond, record=True)
        finally:
            self.unet.ctx.controller = prev
        return {name: p.data for name, p in store.items()}

    def nbytes(self) -> int:
        total = sum(a.nbytes for m in self.matrices.values() for a in m.values())
        if self.latents:
            total += sum(z.nbytes for z in self.latents)
        return total


class EditController:
    """Attention hook for the conditional branch of the editing pass."""

    def __init__(self, record: AttentionRecord, policy: ControlPolicy, pairs: dict[str, str]):
        # pairs: self-attention layer name -> cross-attention layer name of the same block
        self.record, self.policy, self.pairs = record, policy, pairs
        self.step = -1
        self.source: dict[str, np.ndarray] = {}
        self.masks: dict[str, np.ndarray] = {}

    def begin_step(self, step: int) -> None:
        self.step = step
        self.masks = {}
        self.source = self.record.get(step) if self.policy.active(step) else {}

    def mask_for(self, layer: str) -> np.ndarray:
        if layer not in self.masks:
            cross = self.source[self.pairs[layer]]
            self.masks[layer] = blend_mask(cross, self.policy.blend_positions, self.policy.tau)
        return self.masks[layer]

    def __call__(self, layer: str, kind: str, probs: np.ndarray) -> np.ndarray:
        if not self.policy.active(self.step) or layer not in self.source:
            return probs
        if kind == CROSS and self.policy.cross_swap:
            return cross_attention_swap(probs, self.source[layer], self.policy.alignment)
        if kind == SELF and self.policy.self_blend:
            return self_attention_blend(self.source[layer], probs, self.mask_for(layer))
        return probs


def block_pairs(unet) -> dict[str, str]:
    """Map each ST-attention layer to the cross-attention layer in the same transformer block."""
    out = {}
    for layer in unet.attention_layers(SELF):
        block = layer.name.rsplit(".", 1)[0]
        out[layer.name] = f"{block}.attn2"
    return out
