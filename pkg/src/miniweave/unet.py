"""Temporally extended noise predictor over latent videos.

Layout inside the network is channels-last: a latent video is (F, h, w, C)
and attention tokens are (F, h*w, C). Public entry points take the codec's
(F, C, h, w) layout.

Per level the transformer stack is ST-Attn -> cross-attn -> temporal
self-attn -> feed-forward, each residual. Temporal convs follow every
spatial conv. Temporal modules are zero-initialised, so a fresh network
computes exactly what the 2D network would.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .codec import PromptEmbedding, sinusoidal
from .nn import Conv2d, GroupNorm, LayerNorm, Linear, Module, Parameter

SELF, CROSS, TEMPORAL = "self", "cross", "temporal"


class ControlError(RuntimeError):
    pass


@dataclass
class UNetConfig:
    latent_channels: int = 48
    channels: tuple = (64, 128)
    latent_size: int = 16
    heads: int = 4
    head_dim: int = 16
    text_dim: int = 64
    time_dim: int = 64
    groups: int = 8
    temporal_rank: int = 4
    seed: int = 0

    @property
    def resolutions(self) -> list[int]:
        """Token count P_k of each cross-attention layer, in forward order."""
        hi, lo = self.latent_size ** 2, (self.latent_size // 2) ** 2
        return [hi, lo, lo, lo, hi]

    @property
    def num_cross_layers(self) -> int:
        return len(self.resolutions)


@dataclass
class AttentionContext:
    """Shared hook state consulted by every attention layer during a forward."""

    record: bool = False
    store: dict = field(default_factory=dict)
    overrides: dict = field(default_factory=dict)
    controller: object = None
    kinds: tuple = (SELF, CROSS)

    def process(self, layer, probs: T.Tensor) -> T.Tensor:
        if layer.name in self.overrides:
            override = np.asarray(self.overrides.pop(layer.name), dtype=probs.dtype)
            if override.shape != probs.shape:
                raise ControlError(f"{layer.name}: override {override.shape} != probabilities {probs.shape}")
            probs = T.Tensor(override)
        elif self.controller is not None:
            replaced = self.controller(layer.name, layer.kind, probs.data)
            if replaced is not probs.data:
                probs = T.Tensor(np.asarray(replaced, dtype=probs.dtype))
        if self.record and layer.kind in self.kinds:
            self.store[layer.name] = probs
        return probs


def _heads(x: T.Tensor, heads: int) -> T.Tensor:
    *lead, n, c = x.shape
    x = T.reshape(x, (*lead, n, heads, c // heads))
    nd = x.ndim
    return T.transpose(x, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))


def _merge_heads(x: T.Tensor) -> T.Tensor:
    *lead, h, n, d = x.shape
    nd = x.ndim
    x = T.transpose(x, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))
    return T.reshape(x, (*lead, n, h * d))


class Attention(Module):
    kind = SELF

    def __init__(self, dim: int, context_dim: int, heads: int, head_dim: int, rng, zero_out: bool = False):
        inner = heads * head_dim
        self.heads, self.scale = heads, head_dim ** -0.5
        self.to_q = Linear(dim, inner, bias=False, rng=rng)
        self.to_k = Linear(context_dim, inner, bias=False, rng=rng)
        self.to_v = Linear(context_dim, inner, bias=False, rng=rng)
        self.to_out = Linear(inner, dim, rng=rng, zero=zero_out)
        self.ctx: AttentionContext | None = None

    def attend(self, q, k, v):
        scores = T.scale(T.matmul(_heads(q, self.heads), T.transpose(_heads(k, self.heads), _swap_last(k.ndim + 1))), self.scale)
        probs = T.softmax(scores, axis=-1)
        if self.ctx is not None:
            probs = self.ctx.process(self, probs)
        return self.to_out(_merge_heads(T.matmul(probs, _heads(v, self.heads))))


def _swap_last(nd: int) -> tuple:
    return tuple(range(nd - 2)) + (nd - 1, nd - 2)


class STAttention(Attention):
    """Frame i attends to keys/values from [frame 1; frame i-1] (frame 1 uses itself twice)."""

    kind = SELF

    def __call__(self, x: T.Tensor) -> T.Tensor:
        f = x.shape[0]
        first = [0] * f
        former = [max(i - 1, 0) for i in range(f)]
        k_all, v_all = self.to_k(x), self.to_v(x)
        k = T.concat([T.take(k_all, first, 0), T.take(k_all, former, 0)], axis=1)
        v = T.concat([T.take(v_all, first, 0), T.take(v_all, former, 0)], axis=1)
        return self.attend(self.to_q(x), k, v)


class CrossAttention(Attention):
    kind = CROSS

    def __call__(self, x: T.Tensor, text: T.Tensor) -> T.Tensor:
        return self.attend(self.to_q(x), self.to_k(text), self.to_v(text))


class TemporalAttention(Attention):
    """Self-attention along the frame axis per spatial position; zero-initialised output."""

    kind = TEMPORAL

    def __init__(self, dim, heads, head_dim, rng):
        super().__init__(dim, dim, heads, head_dim, rng, zero_out=True)
        self.norm = LayerNorm(dim)

    def __call__(self, x: T.Tensor) -> T.Tensor:
        f, n, c = x.shape
        pos = T.Tensor(sinusoidal(f, c).astype(x.dtype))
        # (N, F, C) + (F, C) is a leading-dim broadcast
        h = T.add(T.transpose(self.norm(x), (1, 0, 2)), pos)
        out = self.attend(self.to_q(h), self.to_k(h), self.to_v(h))
        return T.transpose(out, (1, 0, 2))


class TemporalConv(Module):
    """Low-rank pair of frame-axis convs (C -> r -> C), zero-initialised up-projection, residual."""

    def __init__(self, channels: int, rank: int, rng):
        self.down = Parameter(rng.standard_normal((3, channels, rank)) / np.sqrt(3 * channels))
        self.up = Parameter(np.zeros((3, rank, channels)))

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.add(x, T.conv1d_frames(T.conv1d_frames(x, self.down), self.up))


class ResBlock(Module):
    def __init__(self, cin: int, cout: int, cfg: UNetConfig, rng):
        self.norm1 = GroupNorm(cfg.groups, cin)
        self.conv1 = Conv2d(cin, cout, rng=rng)
        self.tconv1 = TemporalConv(cout, cfg.temporal_rank, rng)
        self.time = Linear(cfg.time_dim * 2, cout, rng=rng)
        self.norm2 = GroupNorm(cfg.groups, cout)
        self.conv2 = Conv2d(cout, cout, rng=rng)
        self.tconv2 = TemporalConv(cout, cfg.temporal_rank, rng)
        self.skip = Linear(cin, cout, rng=rng) if cin != cout else None

    def __call__(self, x, temb, temporal: bool = True):
        h = self.conv1(T.silu(self.norm1(x)))
        if temporal:
            h = self.tconv1(h)
        h = T.add(h, self.time(temb))
        h = self.conv2(T.silu(self.norm2(h)))
        if temporal:
            h = self.tconv2(h)
        return T.add(self.skip(x) if self.skip is not None else x, h)


class Transformer(Module):
    def __init__(self, dim: int, cfg: UNetConfig, rng):
        self.norm1 = LayerNorm(dim)
        self.attn1 = STAttention(dim, dim, cfg.heads, cfg.head_dim, rng)
        self.norm2 = LayerNorm(dim)
        self.attn2 = CrossAttention(dim, cfg.text_dim, cfg.heads, cfg.head_dim, rng)
        self.temporal = TemporalAttention(dim, cfg.heads, cfg.head_dim, rng)
        self.norm3 = LayerNorm(dim)
        self.ff1 = Linear(dim, 2 * dim, rng=rng)
        self.ff2 = Linear(2 * dim, dim, rng=rng)

    def __call__(self, x, text, temporal: bool = True):
        f, h, w, c = x.shape
        tok = T.reshape(x, (f, h * w, c))
        tok = T.add(tok, self.attn1(self.norm1(tok)))
        tok = T.add(tok, self.attn2(self.norm2(tok), text))
        if temporal:
            tok = T.add(tok, self.temporal(tok))
        tok = T.add(tok, self.ff2(T.silu(self.ff1(self.norm3(tok)))))
        return T.reshape(tok, (f, h, w, c))


class VideoUNet(Module):
    """Two-level UNet: down(16^2), down(8^2), mid(8^2), up(8^2), up(16^2); five cross-attention layers."""

    def __init__(self, cfg: UNetConfig | None = None):
        cfg = cfg or UNetConfig()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        c0, c1 = cfg.channels
        self.time1 = Linear(cfg.time_dim, cfg.time_dim * 2, rng=rng)
        self.time2 = Linear(cfg.time_dim * 2, cfg.time_dim * 2, rng=rng)
        self.conv_in = Conv2d(cfg.latent_channels, c0, rng=rng)
        self.down0 = ResBlock(c0, c0, cfg, rng)
        self.down0_xf = Transformer(c0, cfg, rng)
        self.downsample = Conv2d(c0, c0, stride=2, rng=rng)
        self.down1 = ResBlock(c0, c1, cfg, rng)
        self.down1_xf = Transformer(c1, cfg, rng)
        self.mid = ResBlock(c1, c1, cfg, rng)
        self.mid_xf = Transformer(c1, cfg, rng)
        self.up0 = ResBlock(2 * c1, c1, cfg, rng)
        self.up0_xf = Transformer(c1, cfg, rng)
        self.upconv = Conv2d(c1, c1, rng=rng)
        self.up1 = ResBlock(c1 + c0, c0, cfg, rng)
        self.up1_xf = Transformer(c0, cfg, rng)
        self.norm_out = GroupNorm(cfg.groups, c0)
        self.conv_out = Conv2d(c0, cfg.latent_channels, rng=rng)
        self.ctx = AttentionContext()
        self.assign_names()
        for _, mod in self.named_modules():
            if isinstance(mod, Attention):
                mod.ctx = self.ctx

    # -- layer inventories ---------------------------------------------------
    def attention_layers(self, kind: str | None = None) -> list[Attention]:
        return [m for _, m in self.named_modules() if isinstance(m, Attention) and (kind is None or m.kind == kind)]

    def cross_layer_names(self) -> list[str]:
        return [m.name for m in self.attention_layers(CROSS)]

    def layer_resolution(self) -> dict[str, int]:
        return dict(zip(self.cross_layer_names(), self.cfg.resolutions))

    def temporal_parameters(self) -> list[str]:
        names = []
        for name, _ in self.named_parameters():
            if ".tconv" in name or ".temporal." in name:
                names.append(name)
        return names

    def inject_attention(self, layer: str, override: np.ndarray) -> None:
        """Use ``override`` instead of the computed probabilities on the next forward of ``layer``."""
        if layer not in {m.name for m in self.attention_layers()}:
            raise ControlError(f"unknown attention layer {layer!r}")
        self.ctx.overrides[layer] = np.asarray(override)

    # -- forward ---------------------------------------------------------------
    def time_embedding(self, t: float, dtype) -> T.Tensor:
        half = self.cfg.time_dim // 2
        freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
        emb = np.concatenate([np.sin(t * freqs), np.cos(t * freqs)]).astype(dtype)
        return self.time2(T.silu(self.time1(T.Tensor(emb))))

    def __call__(self, z: T.Tensor, t: float, text: T.Tensor, temporal: bool = True) -> T.Tensor:
        """(F, h, w, C) channels-last latent -> noise prediction of the same shape."""
        temb = T.silu(self.time_embedding(t, z.dtype))
        h0 = self.conv_in(z)
        h0 = self.down0_xf(self.down0(h0, temb, temporal), text, temporal)
        h1 = self.downsample(h0)
        h1 = self.down1_xf(self.down1(h1, temb, temporal), text, temporal)
        m = self.mid_xf(self.mid(h1, temb, temporal), text, temporal)
        u = self.up0(T.concat([m, h1], axis=-1), temb, temporal)
        u = self.up0_xf(u, text, temporal)
        u = self.upconv(T.upsample2x(u))
        u = self.up1(T.concat([u, h0], axis=-1), temb, temporal)
        u = self.up1_xf(u, text, temporal)
        return self.conv_out(T.silu(self.norm_out(u)))

    def predict_noise(self, z_t, t: float, cond: PromptEmbedding | T.Tensor, record: bool = False,
                      temporal: bool = True):
        """Noise prediction for a (F, C, h, w) latent video.

        Returns ``(eps, record)`` where ``record`` maps layer name to the post-softmax
        probability tensor (F, heads, queries, keys) when ``record`` is set, else None.
        """
        z_t = z_t if isinstance(z_t, T.Tensor) else T.Tensor(np.asarray(z_t, dtype=np.float32))
        cfg = self.cfg
        if z_t.ndim != 4 or z_t.shape[1] != cfg.latent_channels or z_t.shape[2:] != (cfg.latent_size,) * 2:
            raise T.DimensionError(
                f"latent must be (F, {cfg.latent_channels}, {cfg.latent_size}, {cfg.latent_size}); got {z_t.shape}"
            )
        text = cond.tokens if isinstance(cond, PromptEmbedding) else T.as_tensor(cond)
        self.ctx.record = record
        self.ctx.store = {}
        try:
            eps = self(T.transpose(z_t, (0, 2, 3, 1)), t, text, temporal)
        finally:
            self.ctx.record = False
            self.ctx.overrides.clear()
        store, self.ctx.store = self.ctx.store, {}
        return T.transpose(eps, (0, 3, 1, 2)), (store if record else None)
