"""End-to-end editing of one :class:`~miniweave.scenes.EditingPair`: tune, invert, edit, evaluate."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import lora
from . import scenes as S
from . import tensor as T
from . import training as TR
from .codec import LatentCodec, TextEncoder, Vocabulary
from .config import RunConfig
from .control import AttentionRecord, ControlPolicy, EditController, block_pairs
from .diffusion import Inversion, SamplerConfig, invert, sample
from .metrics import MetricReport, concept_consistency, frame_consistency, m_psnr
from .unet import VideoUNet

logger = logging.getLogger(__name__)

SLOT_PREFIX = "text.slot."
UNET_PREFIX = "unet."


class PrerequisiteError(RuntimeError):
    """A required artifact is missing; the message names the producing command."""


@dataclass
class Models:
    unet: VideoUNet
    encoder: TextEncoder
    codec: LatentCodec
    cfg: RunConfig

    @property
    def schedule(self):
        return self.cfg.schedule

    @property
    def vocab(self) -> Vocabulary:
        return self.encoder.vocab


def build_vocab(cfg: RunConfig) -> Vocabulary:
    return Vocabulary([*cfg.data.prefix.split(), *S.BASE_WORDS, cfg.data.concept_token])


def build_models(cfg: RunConfig) -> Models:
    vocab = build_vocab(cfg)
    enc = TextEncoder(vocab, seed=cfg.seed, prefix=cfg.data.prefix)
    return Models(VideoUNet(cfg.unet), enc, LatentCodec(seed=cfg.seed), cfg)


def state_of(models: Models) -> dict[str, np.ndarray]:
    out = {UNET_PREFIX + k: v for k, v in models.unet.state_dict().items()}
    out.update({SLOT_PREFIX + tok: p.data.copy() for tok, p in models.encoder.slots.items()})
    return out


def load_state(models: Models, tensors: dict[str, np.ndarray]) -> None:
    """Restore UNet weights (attaching LoRA adapters first when present) and concept slots."""
    unet_state = {k[len(UNET_PREFIX):]: v for k, v in tensors.items() if k.startswith(UNET_PREFIX)}
    if any(".lora." in k for k in unet_state) and not lora.adapters_of(models.unet):
        lcfg = models.cfg.lora
        lora.attach(models.unet, lcfg.selector, lcfg.rank, lcfg.scale, lcfg.dropout, seed=models.cfg.seed)
    models.unet.load_state_dict(unet_state)
    for k, v in tensors.items():
        if k.startswith(SLOT_PREFIX):
            tok = k[len(SLOT_PREFIX):]
            if tok not in models.encoder.slots:
                models.encoder.add_concept(tok, models.cfg.data.initializer)
            models.encoder.slots[tok].data = np.array(v, dtype=np.float32)
    models.unet.eval()
    models.unet.requires_grad_(False)


# -- data ------------------------------------------------------------------------

def make_pairs(cfg: RunConfig) -> list[S.EditingPair]:
    d = cfg.data
    return [
        S.make_pair(seed, frames=d.frames, concept=d.concept_token if seed in d.concept_pairs else None, prefix=d.prefix)
        for seed in d.pair_seeds
    ]


@dataclass
class PairData:
    pair: S.EditingPair
    video: np.ndarray
    masks: np.ndarray
    latents: np.ndarray
    concept_video: np.ndarray | None = None
    concept_masks: np.ndarray | None = None
    concept_latents: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    def positions(self, prompt: str, word: str) -> tuple:
        return tuple(i for i, w in enumerate(prompt.split()) if w == word)

    @property
    def replaced_positions(self) -> tuple:
        return self.positions(self.pair.source_prompt, self.pair.swapped[0])

    @property
    def target_positions(self) -> tuple:
        return self.positions(self.pair.target_prompt, self.pair.swapped[1])

    @property
    def concept_positions(self) -> tuple:
        if self.pair.concept_prompt is None:
            return ()
        return self.positions(self.pair.concept_prompt, self.pair.concept_token)


def load_pair(models: Models, pair: S.EditingPair) -> PairData:
    video, masks = S.render(pair.source)
    pd = PairData(pair, video, masks, models.codec.encode(video))
    if pair.concept is not None:
        pd.concept_video, pd.concept_masks = S.render(pair.concept)
        pd.concept_latents = models.codec.encode(pd.concept_video)
    return pd


# -- training phases -----------------------------------------------------------

def fit_base(models: Models, log=None) -> list[float]:
    cfg = models.cfg
    return TR.train_base(models.unet, models.encoder, models.codec, cfg.schedule, S.caption_sampler(frames=cfg.base.frames,
                         prefix=cfg.data.prefix), cfg.base, log=log)


def fit_cati(models: Models, pd: PairData, log=None) -> list[float]:
    """Learn the concept slot and value-projection LoRA on the pair's concept video."""
    pair, cfg = pd.pair, models.cfg
    if pair.concept is None:
        raise TR.TrainingConfigError(f"{pair.name} has no concept video")
    if pair.concept_token not in models.encoder.slots:
        models.encoder.add_concept(pair.concept_token, cfg.data.initializer)
    cati = replace(cfg.cati, lora_rank=cfg.lora.rank, lora_scale=cfg.lora.scale, lora_dropout=cfg.lora.dropout)
    if not lora.adapters_of(models.unet):
        lora.attach(models.unet, cfg.lora.selector, cfg.lora.rank, cfg.lora.scale, cfg.lora.dropout, seed=cati.seed)
    trainer = TR.CatiTrainer(models.unet, models.encoder, cfg.schedule, cati)
    return trainer.fit(pd.concept_latents, pair.concept_prompt, log=log)


def dps_sample(pd: PairData) -> TR.DpsSample:
    pair = pd.pair
    source = TR.VideoSample(pd.latents, pair.source_prompt, pd.masks, pd.replaced_positions)
    concept = None
    if pair.concept is not None:
        concept = TR.VideoSample(pd.concept_latents, pair.concept_prompt, pd.concept_masks, pd.concept_positions)
    return TR.DpsSample(source, pair.target_prompt, pd.target_positions, concept)


def fit_dps(models: Models, pd: PairData, dps: TR.DpsConfig | None = None, log_path=None) -> list[dict]:
    dps = dps or models.cfg.dps
    trainer = TR.DpsTrainer(models.unet, models.encoder, models.cfg.schedule, dps)
    return trainer.fit(dps_sample(pd), log_path=log_path)


# -- inference -------------------------------------------------------------------

def sampler_of(cfg: RunConfig, guidance: float | None = None) -> SamplerConfig:
    s = cfg.sampler
    return SamplerConfig(steps=s.steps, guidance=s.guidance if guidance is None else guidance, eta=s.eta)


def policy_for(models: Models, source_prompt: str, target_prompt: str) -> ControlPolicy:
    cfg = models.cfg
    steps = cfg.sampler.steps
    return ControlPolicy.word_swap(models.encoder.tokenize(source_prompt), models.encoder.tokenize(target_prompt),
                                   steps=steps, end=int(cfg.control.end_fraction * steps), tau=cfg.control.tau)


def invert_pair(models: Models, pd: PairData, target_prompt: str | None = None,
                memory_saving: bool | None = None) -> tuple[Inversion, AttentionRecord]:
    """Guidance-1 DDIM inversion under the source prompt, capturing the attention record.

    Each level is refined by fixed-point iteration (``cfg.inversion``) so that
    sampling back down at guidance 1 retraces the inverted path.
    """
    cfg = models.cfg
    memory_saving = cfg.control.memory_saving if memory_saving is None else memory_saving
    target_prompt = pd.pair.target_prompt if target_prompt is None else target_prompt
    policy = policy_for(models, pd.pair.source_prompt, target_prompt)
    cond = models.encoder.encode_prompt(pd.pair.source_prompt)
    record = AttentionRecord(policy, memory_saving=memory_saving)
    sampler = sampler_of(cfg, 1.0)
    inv = invert(models.unet, cfg.schedule, sampler, pd.latents, cond, guidance=1.0, record=record,
                 refine=cfg.inversion.refine, tol=cfg.inversion.tol)
    record.bind(models.unet, cond, inv.timesteps)
    return inv, record


def edit_latents(models: Models, inversion: Inversion, record: AttentionRecord, source_prompt: str,
                 target_prompt: str, guidance: float | None = None, control: bool = True) -> np.ndarray:
    """Guided sampling from the inverted noise under ``target_prompt`` with attention control."""
    cfg = models.cfg
    policy = policy_for(models, source_prompt, target_prompt)
    policy.cross_swap = policy.self_blend = control
    controller = EditController(record, policy, block_pairs(models.unet)) if control else None
    cond = models.encoder.encode_prompt(target_prompt)
    sampler = sampler_of(cfg, guidance)
    return sample(models.unet, cfg.schedule, sampler, inversion.z_T, cond, models.encoder.empty(), sampler.guidance,
                  controller=controller)


def reconstruct_latents(models: Models, inversion: Inversion, source_prompt: str, guidance: float | None = None) -> np.ndarray:
    """Plain sampling of the inverted noise under the source prompt (no attention control)."""
    cfg = models.cfg
    sampler = sampler_of(cfg, guidance)
    cond = models.encoder.encode_prompt(source_prompt)
    return sample(models.unet, cfg.schedule, sampler, inversion.z_T, cond, models.encoder.empty(), sampler.guidance)


def decode(models: Models, z: np.ndarray) -> np.ndarray:
    return models.codec.decode(z)


def evaluate(pd: PairData, edited: np.ndarray, extractor=None) -> MetricReport:
    """Frame consistency, bounding-box M-PSNR, and concept consistency (concept pairs only)."""
    boxes = S.bbox_masks(pd.masks)
    cc = None
    if pd.concept_video is not None:
        cc = concept_consistency(edited, pd.masks, pd.concept_video, pd.concept_masks, extractor)
    return MetricReport(frame_consistency(list(edited), extractor), m_psnr(pd.video, edited, boxes), cc)


def outside_mass(models: Models, pd: PairData, timesteps=(100, 300, 500, 700, 900), seed: int = 1234) -> dict:
    """Mean cross-attention mass leaked outside the object mask, for replaced and target words.

    Probes the source video at fixed noise levels with fixed noise, so two models
    are compared on identical inputs.
    """
    rng = np.random.default_rng(seed)
    unet, sched = models.unet, models.cfg.schedule
    masks = TR.pool_masks(pd.masks, unet.cfg.resolutions)
    layers = unet.cross_layer_names()
    prompts = {"replaced": (pd.pair.source_prompt, pd.replaced_positions),
               "target": (pd.pair.target_prompt, pd.target_positions)}
    noise = [rng.standard_normal(pd.latents.shape).astype(np.float32) for _ in timesteps]
    out = {}
    for key, (prompt, positions) in prompts.items():
        cond = models.encoder.encode_prompt(prompt)
        vals = []
        for t, eps in zip(timesteps, noise):
            with T.no_grad():
                _, rec = unet.predict_noise(sched.add_noise(pd.latents, eps, t), t, cond, record=True)
            vals.append(TR.outside_mass({k: rec[k] for k in layers}, masks, positions))
        out[key] = float(np.mean(vals))
    out["mean"] = float(np.mean([out["replaced"], out["target"]]))
    return out
