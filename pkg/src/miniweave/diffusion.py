"""Noise schedule, DDIM sampling/inversion and classifier-free guidance."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .codec import PromptEmbedding

CLEAN = -1  # pseudo-timestep of the clean latent (alpha_bar = 1)


@dataclass
class NoiseSchedule:
    train_steps: int = 1000
    beta_start: float = 8.5e-4
    beta_end: float = 1.2e-2

    def __post_init__(self):
        self.betas = np.linspace(self.beta_start, self.beta_end, self.train_steps, dtype=np.float64)
        self.alphas = 1.0 - self.betas
        self.alpha_bar = np.cumprod(self.alphas)

    def abar(self, t: int) -> float:
        return 1.0 if t == CLEAN else float(self.alpha_bar[int(t)])

    def add_noise(self, z0, eps, t: int):
        a = self.abar(t)
        return (np.sqrt(a) * np.asarray(z0, np.float64) + np.sqrt(1.0 - a) * np.asarray(eps, np.float64)).astype(np.float32)

    def recover_noise(self, z0, z_t, t: int):
        a = self.abar(t)
        return (np.asarray(z_t, np.float64) - np.sqrt(a) * np.asarray(z0, np.float64)) / np.sqrt(1.0 - a)

    def add_noise_tensor(self, z0: T.Tensor, eps: np.ndarray, t: int) -> T.Tensor:
        a = self.abar(t)
        return T.add(T.scale(z0, np.sqrt(a)), T.Tensor((np.sqrt(1.0 - a) * eps).astype(z0.dtype)))


@dataclass
class SamplerConfig:
    steps: int = 50
    guidance: float = 12.5
    eta: float = 0.0

    def timesteps(self, schedule: NoiseSchedule) -> list[int]:
        """Ascending DDIM grid [0, stride, ..., train_steps - stride]."""
        if schedule.train_steps % self.steps:
            raise ValueError(f"{self.steps} steps do not divide {schedule.train_steps} training steps")
        if self.eta != 0.0:
            raise ValueError("only deterministic DDIM (eta = 0) is supported")
        stride = schedule.train_steps // self.steps
        return list(range(0, schedule.train_steps, stride))


def _transfer(z, eps, a_from: float, a_to: float):
    z = np.asarray(z, np.float64)
    eps = np.asarray(eps, np.float64)
    x0 = (z - np.sqrt(1.0 - a_from) * eps) / np.sqrt(a_from)
    return (np.sqrt(a_to) * x0 + np.sqrt(1.0 - a_to) * eps).astype(np.float32)


def ddim_step(schedule: NoiseSchedule, z_t, eps, t: int, t_prev: int):
    """Deterministic denoising move from ``t`` to an earlier ``t_prev`` (CLEAN allowed)."""
    if not (t_prev < t):
        raise T.ContractError(f"ddim_step needs t_prev < t, got {t} -> {t_prev}")
    return _transfer(z_t, eps, schedule.abar(t), schedule.abar(t_prev))


def ddim_invert_step(schedule: NoiseSchedule, z_t, eps, t: int, t_next: int):
    """Reverse of :func:`ddim_step` for the same noise estimate: ``t`` -> later ``t_next``."""
    if not (t_next > t):
        raise T.ContractError(f"ddim_invert_step needs t_next > t, got {t} -> {t_next}")
    return _transfer(z_t, eps, schedule.abar(t), schedule.abar(t_next))


def guided_noise(eps_cond, eps_uncond, scale: float):
    return eps_uncond + scale * (eps_cond - eps_uncond)


@dataclass
class Inversion:
    """Result of DDIM inversion.

    ``latents[i]`` is the latent at ``timesteps[i]``; ``z0`` is the clean input.
    ``records[step]`` holds the source-prompt attention at sampling step ``step``
    (sampling step 0 is the noisiest timestep).
    """

    z0: np.ndarray
    timesteps: list[int]
    latents: list[np.ndarray]
    records: object = None

    @property
    def z_T(self) -> np.ndarray:
        return self.latents[-1]

    def timestep_of(self, step: int) -> int:
        return self.timesteps[len(self.timesteps) - 1 - step]

    def latent_of(self, step: int) -> np.ndarray:
        return self.latents[len(self.latents) - 1 - step]


def _eps(unet, z, t, cond, record=False):
    with T.no_grad():
        eps, rec = unet.predict_noise(T.Tensor(z), t, cond, record=record)
    return eps.data, rec


def invert(unet, schedule: NoiseSchedule, sampler: SamplerConfig, z0: np.ndarray, cond: PromptEmbedding,
           guidance: float = 1.0, uncond: PromptEmbedding | None = None, record=None,
           refine: int = 0, tol: float = 0.0) -> Inversion:
    """DDIM inversion of ``z0`` under the source prompt.

    The move from grid level ``t_{i-1}`` to ``t_i`` first uses the noise predicted
    at ``(z_{t_{i-1}}, t_{i-1})`` (the first move from the clean latent uses
    ``t_0``). With ``refine > 0`` the estimate is then corrected by fixed-point
    iteration on ``z_{t_i} = invert_step(z_{t_{i-1}}, eps(z_{t_i}, t_i))`` with at
    most ``refine`` evaluations per level, stopping early once the largest latent
    change drops below ``tol``. The kept latent is the last evaluated point, so
    the stored latent, its noise estimate and its attention record agree.

    When ``record`` (an attention store with ``wants(step)`` / ``put(step, store)``)
    is given, attention at each level is captured for the matching sampling step;
    without refinement one extra forward at the top level completes the record.
    """
    ts = sampler.timesteps(schedule)
    n = len(ts)

    def eps_at(z, t, want):
        e, rec = _eps(unet, z, t, cond, record=want)
        if guidance != 1.0:
            e = guided_noise(e, _eps(unet, z, t, uncond)[0], guidance)
        return e, rec

    z = np.asarray(z0, np.float32)
    latents = []
    prev = CLEAN
    for i, t in enumerate(ts):
        eval_t = t if prev == CLEAN else prev
        if refine:
            eps, _ = eps_at(z, eval_t, False)
            z_new = ddim_invert_step(schedule, z, eps, prev, t)
            step = n - 1 - i
            want = record is not None and record.wants(step)
            rec = None
            for k in range(refine):
                eps, rec = eps_at(z_new, t, want)
                nxt = ddim_invert_step(schedule, z, eps, prev, t)
                if k == refine - 1 or float(np.abs(nxt - z_new).max()) <= tol:
                    break  # keep the evaluated point so latent, noise and record agree
                z_new = nxt
            if want:
                record.put(step, rec)
            z = z_new
        else:
            step = n - 1 - (i - 1) if prev != CLEAN else None
            want = record is not None and step is not None and record.wants(step)
            eps, rec = eps_at(z, eval_t, want)
            if want:
                record.put(step, rec)
            z = ddim_invert_step(schedule, z, eps, prev, t)
        latents.append(z)
        prev = t
    if record is not None:
        record.put_latents(latents)
        if not refine and record.wants(0):
            record.put(0, _eps(unet, z, ts[-1], cond, record=True)[1])
    return Inversion(np.asarray(z0, np.float32), ts, latents, record)


def sample(unet, schedule: NoiseSchedule, sampler: SamplerConfig, z_T: np.ndarray, cond: PromptEmbedding,
           uncond: PromptEmbedding | None = None, guidance: float | None = None, controller=None,
           return_trajectory: bool = False):
    """Guided DDIM sampling from ``z_T`` at the top grid level down to the clean latent.

    ``controller`` (optional) exposes ``begin_step(step)`` and is installed as the
    attention hook for the conditional branch only.
    """
    guidance = sampler.guidance if guidance is None else guidance
    ts = sampler.timesteps(schedule)
    z = np.asarray(z_T, np.float32)
    traj = [z]
    for step in range(len(ts)):
        t = ts[len(ts) - 1 - step]
        t_prev = ts[len(ts) - 2 - step] if step < len(ts) - 1 else CLEAN
        if controller is not None:
            controller.begin_step(step)
            unet.ctx.controller = controller
        try:
            eps_c, _ = _eps(unet, z, t, cond)
        finally:
            unet.ctx.controller = None
        if guidance != 1.0:
            if uncond is None:
                raise ValueError("guidance != 1 needs an unconditional embedding")
            eps = guided_noise(eps_c, _eps(unet, z, t, uncond)[0], guidance)
        else:
            eps = eps_c
        z = ddim_step(schedule, z, eps, t, t_prev)
        traj.append(z)
    return (z, traj) if return_trajectory else z
