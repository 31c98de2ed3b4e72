"""Base stand-in training, concept-augmented textual inversion, and dual-prior-supervised tuning."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import lora
from . import tensor as T
from .codec import LatentCodec, PromptEmbedding, TextEncoder
from .diffusion import NoiseSchedule
from .unet import CROSS, VideoUNet

logger = logging.getLogger(__name__)

CROSS_VALUE_SELECTOR = "*.attn2.to_v"


class TrainingConfigError(ValueError):
    pass


class MaskDataError(ValueError):
    pass


# -- optimiser ----------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay; ``groups`` is a list of (params, lr)."""

    def __init__(self, groups, betas=(0.9, 0.999), weight_decay=1e-2, eps=1e-8):
        self.groups = [(list(ps), float(lr)) for ps, lr in groups]
        self.b1, self.b2 = betas
        self.wd, self.eps = weight_decay, eps
        self.t = 0
        self.m: dict[int, np.ndarray] = {}
        self.v: dict[int, np.ndarray] = {}

    def zero_grad(self) -> None:
        for ps, _ in self.groups:
            for p in ps:
                p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for ps, lr in self.groups:
            for p in ps:
                if p.grad is None:
                    continue
                g = p.grad.astype(np.float64)
                m = self.m.get(id(p), 0.0) * self.b1 + (1 - self.b1) * g
                v = self.v.get(id(p), 0.0) * self.b2 + (1 - self.b2) * g * g
                self.m[id(p)], self.v[id(p)] = m, v
                new = p.data.astype(np.float64) * (1.0 - lr * self.wd) - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
                p.data = new.astype(p.dtype)


# -- masks and attention-mask losses -----------------------------------------------

@dataclass
class MaskPyramid:
    """Binary masks max-pooled to each attention side length; ``levels[side]`` is (F, side, side)."""

    levels: dict

    def tokens(self, positions: int) -> np.ndarray:
        side = int(round(np.sqrt(positions)))
        if side * side != positions or side not in self.levels:
            raise T.ContractError(f"no mask level for {positions} attention positions")
        m = self.levels[side]
        return m.reshape(m.shape[0], -1)


def pool_masks(mask: np.ndarray, resolutions) -> MaskPyramid:
    """Max-pool a full-resolution (F, H, W) or (H, W) mask to every P_k in ``resolutions``."""
    mask = np.asarray(mask, dtype=np.float32)
    if mask.ndim == 2:
        mask = mask[None]
    f, h, w = mask.shape
    levels = {}
    for p in resolutions:
        side = int(round(np.sqrt(p)))
        if side * side != p or h % side or w % side:
            raise T.ContractError(f"cannot pool {h}x{w} to {p} positions")
        kh, kw = h // side, w // side
        levels[side] = (mask.reshape(f, side, kh, side, kw).max(axis=(2, 4)) > 0).astype(np.float32)
    return MaskPyramid(levels)


def attention_mask_loss(records: dict, masks: MaskPyramid, positions, layers=None) -> T.Tensor:
    """(1/K) sum_k sum_i |M_gt - M| (1 - M_gt) over the K cross-attention layers.

    ``records[layer]`` is a post-softmax (F, heads, P_k, L) tensor. Maps are
    averaged over heads; the per-position sum is taken per frame against that
    frame's mask and averaged over frames and over the supervised tokens.
    """
    positions = list(positions)
    if not positions:
        raise TrainingConfigError("no supervised token positions")
    layers = list(records) if layers is None else list(layers)
    total = None
    for name in layers:
        probs = T.as_tensor(records[name])
        f, _, p, _ = probs.shape
        gt = masks.tokens(p)
        if gt.shape[0] != f:
            raise T.ContractError(f"{name}: mask has {gt.shape[0]} frames, attention has {f}")
        m = T.mean(T.take(probs, positions, axis=3), axis=1)  # (F, P, J)
        g = T.Tensor(np.repeat(gt[:, :, None], len(positions), axis=2).astype(probs.dtype))
        term = T.mul(T.abs_(T.sub(g, m)), T.Tensor((1.0 - g.data)))
        layer_loss = T.scale(T.sum_(term), 1.0 / (f * len(positions)))
        total = layer_loss if total is None else T.add(total, layer_loss)
    return T.scale(total, 1.0 / len(layers))


def scam_loss(records, masks, positions, layers=None) -> T.Tensor:
    """Source/concept-word attention leaked outside the object mask."""
    return attention_mask_loss(records, masks, positions, layers)


def tcam_loss(records, masks, positions, layers=None) -> T.Tensor:
    """Target-word attention leaked outside the object mask (source video, target prompt)."""
    return attention_mask_loss(records, masks, positions, layers)


def outside_mass(records: dict, masks: MaskPyramid, positions, layers=None) -> float:
    """Evaluation form of the mask loss for numpy records."""
    with T.no_grad():
        recs = {k: T.as_tensor(v) for k, v in records.items()}
        return float(attention_mask_loss(recs, masks, positions, layers).data)


# -- parameter selection -----------------------------------------------------------

def set_trainable(model, names) -> list:
    names = set(names)
    params = []
    for name, p in model.named_parameters():
        p.requires_grad = name in names
        if p.requires_grad:
            params.append(p)
    return params


def dps_trainable_names(unet: VideoUNet) -> list[str]:
    """Temporal convs, temporal self-attention, and query projections of ST- and cross-attention."""
    out = []
    for name, _ in unet.named_parameters():
        if ".lora." in name:
            continue
        if ".tconv" in name or ".temporal." in name or name.endswith(("attn1.to_q.weight", "attn2.to_q.weight")):
            out.append(name)
    return out


def base_trainable_names(unet: VideoUNet) -> list[str]:
    return [n for n, _ in unet.named_parameters() if not (".tconv" in n or ".temporal." in n or ".lora." in n)]


# -- shared pieces ----------------------------------------------------------------

@dataclass
class VideoSample:
    """Latent video plus its prompt and object masks."""

    latents: np.ndarray  # (F, 48, h, w)
    prompt: str
    masks: np.ndarray | None = None  # (F, H, W) full-resolution
    positions: tuple = ()  # supervised token positions in ``prompt``

    @classmethod
    def from_video(cls, codec: LatentCodec, video, prompt, masks=None, positions=()):
        return cls(codec.encode(video), prompt, masks, tuple(positions))


def noise_loss(unet: VideoUNet, schedule: NoiseSchedule, z0: np.ndarray, cond: PromptEmbedding, rng,
               record: bool = False, temporal: bool = True):
    t = int(rng.integers(0, schedule.train_steps))
    eps = rng.standard_normal(z0.shape).astype(np.float32)
    z_t = schedule.add_noise(z0, eps, t)
    pred, rec = unet.predict_noise(T.Tensor(z_t), t, cond, record=record, temporal=temporal)
    return T.mse(pred, T.Tensor(eps)), rec


def _embed(encoder: TextEncoder, prompt: str, rng, dropout: float) -> tuple[PromptEmbedding, bool]:
    if dropout > 0 and rng.random() < dropout:
        return encoder.empty(), True
    return encoder.encode_prompt(prompt), False


# -- base stand-in -------------------------------------------------------------------

@dataclass
class BaseConfig:
    steps: int = 3000
    lr: float = 5e-4
    frames: int = 3
    prompt_dropout: float = 0.1
    seed: int = 0


def train_base(unet: VideoUNet, encoder: TextEncoder, codec: LatentCodec, schedule: NoiseSchedule, scenes,
               cfg: BaseConfig, log=None) -> list[float]:
    """Fit the spatial (2D) network on captioned synthetic clips; temporal modules stay zero.

    ``scenes`` yields ``(video, prompt)`` tuples when called with an rng.
    """
    rng = np.random.default_rng(cfg.seed)
    params = set_trainable(unet, base_trainable_names(unet))
    opt = AdamW([(params, cfg.lr)])
    unet.train()
    losses = []
    for step in range(cfg.steps):
        video, prompt = scenes(rng)
        z0 = codec.encode(video)
        cond, _ = _embed(encoder, prompt, rng, cfg.prompt_dropout)
        loss, _ = noise_loss(unet, schedule, z0, cond, rng, temporal=False)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if log is not None and (step % 100 == 0 or step == cfg.steps - 1):
            log(step, float(np.mean(losses[-100:])))
    unet.eval()
    unet.requires_grad_(False)
    return losses


# -- phase 1: concept-augmented textual inversion ---------------------------------

@dataclass
class CatiConfig:
    lr_embeddings: float = 1e-3
    lr_lora: float = 1e-5
    steps: int = 800
    min_frames: int = 4
    max_frames: int = 8
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 1e-2
    eps: float = 1e-8
    lora_rank: int = 4
    lora_scale: float = 1.0
    lora_dropout: float = 0.1
    prompt_dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not self.lr_lora < self.lr_embeddings:
            raise TrainingConfigError("LoRA learning rate must be smaller than the embedding learning rate")
        if not 1 <= self.min_frames <= self.max_frames:
            raise TrainingConfigError("invalid frame-count range")


class CatiTrainer:
    """Jointly learns concept-word slots and LoRA on cross-attention value projections."""

    def __init__(self, unet: VideoUNet, encoder: TextEncoder, schedule: NoiseSchedule, cfg: CatiConfig):
        self.unet, self.encoder, self.schedule, self.cfg = unet, encoder, schedule, cfg
        self.rng = np.random.default_rng(cfg.seed)
        adapters = lora.adapters_of(unet)
        if not adapters:
            adapters = lora.attach(unet, CROSS_VALUE_SELECTOR, cfg.lora_rank, cfg.lora_scale, cfg.lora_dropout, seed=cfg.seed)
        self.adapters = adapters
        lora_names = [n for n, _ in unet.named_parameters() if ".lora." in n]
        lora_params = set_trainable(unet, lora_names)
        slots = list(encoder.slots.values())
        for s in slots:
            s.requires_grad = True
        self.opt = AdamW([(slots, cfg.lr_embeddings), (lora_params, cfg.lr_lora)], cfg.betas, cfg.weight_decay, cfg.eps)

    def step(self, latents: np.ndarray, prompt: str) -> float:
        """One update on a random clip of ``latents`` (frame count drawn from the configured range)."""
        cfg, rng = self.cfg, self.rng
        if not any(w.startswith("$") for w in prompt.split()):
            raise TrainingConfigError(f"prompt {prompt!r} has no concept token")
        total = latents.shape[0]
        n = int(rng.integers(cfg.min_frames, cfg.max_frames + 1))
        n = min(n, total)
        start = int(rng.integers(0, total - n + 1))
        clip = latents[start : start + n]
        cond, _ = _embed(self.encoder, prompt, rng, cfg.prompt_dropout)
        self.unet.train()
        try:
            loss, _ = noise_loss(self.unet, self.schedule, clip, cond, rng)
        finally:
            self.unet.eval()
        self.opt.zero_grad()
        loss.backward()
        self.opt.step()
        return loss.item()

    def fit(self, latents: np.ndarray, prompt: str, steps: int | None = None, log=None) -> list[float]:
        losses = []
        steps = self.cfg.steps if steps is None else steps
        for i in range(steps):
            losses.append(self.step(latents, prompt))
            if log is not None and (i % 100 == 0 or i == steps - 1):
                log(i, float(np.mean(losses[-100:])))
        self.finish()
        return losses

    def finish(self) -> None:
        for s in self.encoder.slots.values():
            s.requires_grad = False
        self.unet.requires_grad_(False)


# -- phase 2: dual prior supervision ----------------------------------------------

@dataclass
class DpsConfig:
    alpha: float = 0.1
    beta: float = 0.1
    epochs: int = 60
    lr: float = 3e-4
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 1e-2
    eps: float = 1e-8
    prompt_dropout: float = 0.1
    seed: int = 0


@dataclass
class DpsSample:
    """Everything one editing pair contributes to tuning."""

    source: VideoSample  # positions: the words to be replaced
    target_prompt: str
    target_positions: tuple
    concept: VideoSample | None = None  # positions: concept words

    def check(self, unet: VideoUNet) -> dict[str, MaskPyramid]:
        res = unet.cfg.resolutions
        out = {}
        for key, s in (("source", self.source), ("concept", self.concept)):
            if s is None:
                continue
            if s.positions and s.masks is None:
                raise MaskDataError(f"{key} video has supervised tokens but no mask")
            out[key] = pool_masks(s.masks, res) if s.masks is not None else None
        if self.target_positions and self.source.masks is None:
            raise MaskDataError("target words need the source mask")
        return out


class DpsTrainer:
    """Tunes the temporal/query parameter set with noise + alpha*scam + beta*tcam."""

    def __init__(self, unet: VideoUNet, encoder: TextEncoder, schedule: NoiseSchedule, cfg: DpsConfig):
        self.unet, self.encoder, self.schedule, self.cfg = unet, encoder, schedule, cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.names = dps_trainable_names(unet)
        params = set_trainable(unet, self.names)
        for s in encoder.slots.values():
            s.requires_grad = False
        self.opt = AdamW([(params, cfg.lr)], cfg.betas, cfg.weight_decay, cfg.eps)

    def _update(self, loss: T.Tensor) -> None:
        self.opt.zero_grad()
        loss.backward()
        self.opt.step()

    def _supervised_step(self, sample: VideoSample, masks: MaskPyramid | None) -> tuple[float, float]:
        cfg, rng = self.cfg, self.rng
        cond, dropped = _embed(self.encoder, sample.prompt, rng, cfg.prompt_dropout)
        supervise = cfg.alpha > 0 and not dropped and bool(sample.positions)
        loss, rec = noise_loss(self.unet, self.schedule, sample.latents, cond, rng, record=supervise)
        scam = 0.0
        if supervise:
            s = scam_loss(rec, masks, sample.positions, self.unet.cross_layer_names())
            scam = s.item()
            loss = T.add(loss, T.scale(s, cfg.alpha))
            noise = loss.item() - cfg.alpha * scam
        else:
            noise = loss.item()
        self._update(loss)
        return noise, scam

    def epoch(self, sample: DpsSample) -> dict:
        """(a) source pair, (b) concept pair, (c) tcam on (source video, target prompt); one update each."""
        masks = sample.check(self.unet)
        self.unet.train()
        try:
            n_a, s_a = self._supervised_step(sample.source, masks.get("source"))
            n_b = s_b = 0.0
            if sample.concept is not None:
                n_b, s_b = self._supervised_step(sample.concept, masks.get("concept"))
            tcam = 0.0
            if self.cfg.beta > 0 and sample.target_positions:
                cond = self.encoder.encode_prompt(sample.target_prompt)
                _, rec = noise_loss(self.unet, self.schedule, sample.source.latents, cond, self.rng, record=True)
                tl = tcam_loss(rec, masks["source"], sample.target_positions, self.unet.cross_layer_names())
                tcam = tl.item()
                self._update(T.scale(tl, self.cfg.beta))
        finally:
            self.unet.eval()
        parts = 2 if sample.concept is not None else 1
        noise = (n_a + n_b) / parts
        scam = (s_a + s_b) / parts
        return {"noise": noise, "scam": scam, "tcam": tcam,
                "total": noise + self.cfg.alpha * scam + self.cfg.beta * tcam}

    def fit(self, sample: DpsSample, epochs: int | None = None, log_path=None) -> list[dict]:
        epochs = self.cfg.epochs if epochs is None else epochs
        rows = []
        for e in range(epochs):
            row = self.epoch(sample)
            row["epoch"] = e
            rows.append(row)
        if log_path is not None:
            write_log(log_path, rows)
        self.unet.requires_grad_(False)
        return rows


def write_log(path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss_noise", "loss_scam", "loss_tcam", "loss_total"])
        for r in rows:
            w.writerow([r["epoch"], f"{r['noise']:.6f}", f"{r['scam']:.6f}", f"{r['tcam']:.6f}", f"{r['total']:.6f}"])
