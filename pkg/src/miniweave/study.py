"""Directional comparison of DPS tuning against plain tuning over several editing pairs."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import pipeline as P
from .config import RunConfig


@dataclass
class PairOutcome:
    """Per-pair numbers for both tuning variants.

    ``mass_*`` is the mean cross-attention mass outside the object mask for the
    supervised words (see :func:`miniweave.pipeline.outside_mass`).
    """

    pair: str
    mass_before: float
    mass_dps: float
    mass_baseline: float
    m_psnr_dps: float
    m_psnr_baseline: float
    frame_consistency_dps: float
    frame_consistency_baseline: float
    concept_consistency_dps: float | None
    concept_consistency_baseline: float | None
    seconds: float


@dataclass
class StudySummary:
    outcomes: list
    cati_seconds: float

    @property
    def mean_mass_before(self) -> float:
        return float(np.mean([o.mass_before for o in self.outcomes]))

    @property
    def mean_mass_dps(self) -> float:
        return float(np.mean([o.mass_dps for o in self.outcomes]))

    @property
    def mass_drop(self) -> float:
        """Relative decrease of outside-mask attention mass after DPS."""
        return 1.0 - self.mean_mass_dps / self.mean_mass_before

    @property
    def mean_m_psnr_dps(self) -> float:
        return float(np.mean([o.m_psnr_dps for o in self.outcomes]))

    @property
    def mean_m_psnr_baseline(self) -> float:
        return float(np.mean([o.m_psnr_baseline for o in self.outcomes]))

    @property
    def seconds(self) -> float:
        return self.cati_seconds + sum(o.seconds for o in self.outcomes)

    def to_dict(self) -> dict:
        return {"outcomes": [asdict(o) for o in self.outcomes], "cati_seconds": self.cati_seconds}

    @classmethod
    def from_dict(cls, d: dict) -> "StudySummary":
        return cls([PairOutcome(**o) for o in d["outcomes"]], d["cati_seconds"])


def tuned_starts(cfg: RunConfig, base_state: dict, log=None) -> tuple[dict, float]:
    """Phase-1 state per pair: CATI on concept pairs, the base weights elsewhere.

    Returns ``(states by pair name, seconds spent in CATI)``.
    """
    states, spent = {}, 0.0
    for pair in P.make_pairs(cfg):
        if pair.concept is None:
            states[pair.name] = base_state
            continue
        t0 = time.perf_counter()
        models = P.build_models(cfg)
        P.load_state(models, base_state)
        P.fit_cati(models, P.load_pair(models, pair), log=log)
        states[pair.name] = P.state_of(models)
        spent += time.perf_counter() - t0
    return states, spent


def tune_and_edit(cfg: RunConfig, start: dict, pair, variant: str):
    """Phase-2 tuning (``dps`` or ``baseline``), inversion, and editing of one pair.

    Returns ``(models, pair data, edited video, report)``.
    """
    models = P.build_models(cfg)
    P.load_state(models, start)
    pd = P.load_pair(models, pair)
    dps = cfg.dps if variant == "dps" else replace(cfg.dps, alpha=0.0, beta=0.0)
    P.fit_dps(models, pd, dps)
    inv, record = P.invert_pair(models, pd)
    z = P.edit_latents(models, inv, record, pair.source_prompt, pair.target_prompt)
    video = P.decode(models, z)
    return models, pd, video, P.evaluate(pd, video)


def run_study(cfg: RunConfig, base_state: dict, log=None, keep: dict | None = None,
              starts: tuple[dict, float] | None = None) -> StudySummary:
    """Tune every configured pair twice and compare editing quality and attention leakage.

    Args:
        cfg: run configuration; ``data.pair_seeds`` selects the pairs.
        base_state: pretrained weights every pair starts from.
        log: optional callback receiving each :class:`PairOutcome`.
        keep: optional dict receiving tuned states as ``{(pair, variant): state}``.
        starts: precomputed result of :func:`tuned_starts`.
    """
    starts, cati_seconds = starts if starts is not None else tuned_starts(cfg, base_state)
    outcomes = []
    for pair in P.make_pairs(cfg):
        t0 = time.perf_counter()
        probe = P.build_models(cfg)
        P.load_state(probe, starts[pair.name])
        before = P.outside_mass(probe, P.load_pair(probe, pair))["mean"]
        res = {}
        for variant in ("dps", "baseline"):
            models, pd, _, report = tune_and_edit(cfg, starts[pair.name], pair, variant)
            res[variant] = (P.outside_mass(models, pd)["mean"], report)
            if keep is not None:
                keep[(pair.name, variant)] = P.state_of(models)
        (m_dps, r_dps), (m_base, r_base) = res["dps"], res["baseline"]
        out = PairOutcome(pair.name, before, m_dps, m_base, r_dps.m_psnr, r_base.m_psnr, r_dps.frame_consistency,
                          r_base.frame_consistency, r_dps.concept_consistency, r_base.concept_consistency,
                          time.perf_counter() - t0)
        outcomes.append(out)
        if log is not None:
            log(out)
    return StudySummary(outcomes, cati_seconds)
