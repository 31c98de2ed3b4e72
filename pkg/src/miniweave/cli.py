"""Command-line entry point: ``miniweave <command> [--config PATH] [--seed N] [--out DIR]``."""

from __future__ import annotations

import os

# BLAS pools are sized at import time, so the cap must be exported before numpy loads.
if os.environ.get("MINIWEAVE_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = os.environ["MINIWEAVE_THREADS"]

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint as CK
from . import config as C
from . import pipeline as P
from . import scenes as S
from .control import AttentionRecord
from .diffusion import Inversion

logger = logging.getLogger("miniweave")

VARIANTS = ("dps", "baseline")


class Run:
    """Resolved config plus the artifact layout under ``out``."""

    def __init__(self, cfg: C.RunConfig, pair_seed: int | None, force: bool = False):
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.force = force
        seed = cfg.data.demo_pair if pair_seed is None else pair_seed
        pairs = {p.name: p for p in P.make_pairs(cfg)}
        name = f"pair{seed}"
        if name not in pairs:
            raise C.ConfigError(f"pair seed {seed} is not listed in data.pair_seeds {cfg.data.pair_seeds}")
        self.pair = pairs[name]
        self.pair_dir = self.out / self.pair.name

    @property
    def base_path(self) -> Path:
        return self.out / "base.mwv"

    def variant_dir(self, variant: str) -> Path:
        return self.pair_dir / variant

    def meta(self, phase: str, **extra) -> dict:
        return {"phase": phase, "config_hash": self.cfg.hash(), "pair": self.pair.name, **extra}

    def fresh(self, path: Path, phase: str) -> bool:
        """True when ``path`` already holds this phase's output for the current config."""
        if self.force or not path.exists():
            return False
        try:
            _, meta = CK.load(path)
        except CK.CheckpointError:
            return False
        return meta.get("config_hash") == self.cfg.hash() and meta.get("phase") == phase

    def require(self, path: Path, producer: str) -> tuple[dict, dict]:
        if not path.exists():
            raise P.PrerequisiteError(f"{path} is missing; run `miniweave {producer}` first")
        return CK.load(path)


def _models(run: Run, state_path: Path | None = None, producer: str = "") -> P.Models:
    models = P.build_models(run.cfg)
    if state_path is not None:
        tensors, _ = run.require(state_path, producer)
        P.load_state(models, tensors)
    return models


# -- commands -----------------------------------------------------------------------

def cmd_synth(run: Run, args) -> dict:
    root = Path(run.cfg.corpus)
    if not root.is_absolute():
        root = run.out / root
    vocab = P.build_vocab(run.cfg)
    manifest = S.make_corpus(P.make_pairs(run.cfg), root, vocab.tokens[2:])
    logger.info("wrote %d pairs to %s", len(manifest["pairs"]), root)
    return {"corpus": str(root), "pairs": len(manifest["pairs"])}


def cmd_pretrain(run: Run, args) -> dict:
    if run.fresh(run.base_path, "base"):
        logger.info("base model up to date: %s", run.base_path)
        return {"checkpoint": str(run.base_path), "skipped": True}
    models = _models(run)
    t0 = time.time()
    losses = P.fit_base(models, log=lambda i, l: logger.info("base step %d loss %.4f", i, l))
    CK.save(run.base_path, P.state_of(models), run.meta("base", step=len(losses)))
    _write_log(run.out / "base_log.csv", ["step", "loss"], enumerate(losses))
    return {"checkpoint": str(run.base_path), "seconds": round(time.time() - t0, 1)}


def cmd_train_cati(run: Run, args) -> dict:
    path = run.pair_dir / "cati.mwv"
    if run.fresh(path, "cati"):
        return {"checkpoint": str(path), "skipped": True}
    models = _models(run, run.base_path, "pretrain")
    pd = P.load_pair(models, run.pair)
    if run.pair.concept is None:
        # no concept video: phase 1 has nothing to learn, the base weights pass through
        CK.save(path, P.state_of(models), run.meta("cati", step=0, concept=False))
        return {"checkpoint": str(path), "concept": False}
    losses = P.fit_cati(models, pd, log=lambda i, l: logger.info("cati step %d loss %.4f", i, l))
    CK.save(path, P.state_of(models), run.meta("cati", step=len(losses), concept=True))
    _write_log(run.pair_dir / "cati_log.csv", ["step", "loss"], enumerate(losses))
    return {"checkpoint": str(path), "concept": True, "final_loss": float(np.mean(losses[-50:]))}


def cmd_train_dps(run: Run, args) -> dict:
    variant = args.variant
    vdir = run.variant_dir(variant)
    path = vdir / "model.mwv"
    if run.fresh(path, variant):
        return {"checkpoint": str(path), "skipped": True}
    models = _models(run, run.pair_dir / "cati.mwv", "train-cati")
    pd = P.load_pair(models, run.pair)
    dps = run.cfg.dps
    if variant == "baseline":
        dps = replace(dps, alpha=0.0, beta=0.0)
    rows = P.fit_dps(models, pd, dps, log_path=vdir / "train_log.csv")
    CK.save(path, P.state_of(models), run.meta(variant, step=len(rows)))
    return {"checkpoint": str(path), "epochs": len(rows), "final": rows[-1] if rows else None}


def cmd_invert(run: Run, args) -> dict:
    vdir = run.variant_dir(args.variant)
    path = vdir / "inversion.mwv"
    if run.fresh(path, "inversion") and CK.load(path)[1].get("cached") == bool(args.cache_attention):
        return {"inversion": str(path), "skipped": True}
    models = _models(run, vdir / "model.mwv", f"train-dps --variant {args.variant}")
    pd = P.load_pair(models, run.pair)
    inv, record = P.invert_pair(models, pd, memory_saving=not args.cache_attention)
    tensors = {f"latent.{i:03d}": z for i, z in enumerate(inv.latents)}
    tensors["z0"] = inv.z0
    if args.cache_attention:
        for step, mats in record.matrices.items():
            tensors.update({f"attn.{step:03d}.{name}": m.astype(np.float32) for name, m in mats.items()})
    CK.save(path, tensors, run.meta("inversion", timesteps=inv.timesteps, cached=bool(args.cache_attention)))
    return {"inversion": str(path), "steps": len(inv.timesteps), "cached_attention": bool(args.cache_attention)}


def _load_inversion(run: Run, models: P.Models, variant: str, source_prompt: str, target_prompt: str):
    path = run.variant_dir(variant) / "inversion.mwv"
    tensors, meta = run.require(path, f"invert --variant {variant}")
    latents = [tensors[k] for k in sorted(k for k in tensors if k.startswith("latent."))]
    inv = Inversion(tensors["z0"], list(meta["timesteps"]), latents)
    policy = P.policy_for(models, source_prompt, target_prompt)
    cached = bool(meta.get("cached"))
    record = AttentionRecord(policy, memory_saving=not cached)
    if cached:
        for key, arr in tensors.items():
            if key.startswith("attn."):
                _, step, name = key.split(".", 2)
                record.matrices.setdefault(int(step), {})[name] = arr
    else:
        record.put_latents(latents)
    record.bind(models.unet, models.encoder.encode_prompt(source_prompt), inv.timesteps)
    return inv, record


def cmd_edit(run: Run, args) -> dict:
    vdir = run.variant_dir(args.variant)
    models = _models(run, vdir / "model.mwv", f"train-dps --variant {args.variant}")
    source = run.pair.source_prompt
    target = args.target or run.pair.target_prompt
    inv, record = _load_inversion(run, models, args.variant, source, target)
    z = P.edit_latents(models, inv, record, source, target, guidance=args.guidance)
    video = models.codec.decode(z)
    edir = vdir / ("edit" if args.target is None else f"edit_{_slug(target)}")
    S.write_video(edir, video)
    CK.save(edir / "latents.mwv", {"z": z}, run.meta("edit", target=target))
    return {"frames": str(edir / "frames"), "target": target}


def cmd_eval(run: Run, args) -> dict:
    vdir = run.variant_dir(args.variant)
    edir = vdir / "edit"
    if not (edir / "latents.mwv").exists():
        raise P.PrerequisiteError(f"{edir} has no edited video; run `miniweave edit --variant {args.variant}` first")
    models = P.build_models(run.cfg)
    pd = P.load_pair(models, run.pair)
    z = CK.load(edir / "latents.mwv")[0]["z"]
    report = P.evaluate(pd, models.codec.decode(z))
    (vdir / "report.json").write_text(json.dumps(report.to_dict(), indent=2))
    rows_path = run.out / "metrics.csv"
    new = not rows_path.exists()
    with rows_path.open("a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["pair", "variant", "frame_consistency", "m_psnr", "concept_consistency"])
        cc = "" if report.concept_consistency is None else f"{report.concept_consistency:.6f}"
        w.writerow([run.pair.name, args.variant, f"{report.frame_consistency:.6f}", f"{report.m_psnr:.4f}", cc])
    return report.to_dict()


def cmd_all(run: Run, args) -> dict:
    out = {}
    for name, fn in (("synth", cmd_synth), ("pretrain", cmd_pretrain), ("train-cati", cmd_train_cati),
                     ("train-dps", cmd_train_dps), ("invert", cmd_invert), ("edit", cmd_edit), ("eval", cmd_eval)):
        logger.info("== %s", name)
        out[name] = fn(run, args)
    return out


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "train-cati": cmd_train_cati,
    "train-dps": cmd_train_dps,
    "invert": cmd_invert,
    "edit": cmd_edit,
    "eval": cmd_eval,
    "all": cmd_all,
}


def _slug(text: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in text)[:48]


def _write_log(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow(r)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="miniweave", description="Desk-scale concept-aware video editing.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", type=Path, help="JSON run config (defaults apply to missing keys)")
    parser.add_argument("--seed", type=int, help="override the run seed")
    parser.add_argument("--out", type=Path, help="output directory (overrides config 'out')")
    parser.add_argument("--pair", type=int, help="pair seed to operate on (default: data.demo_pair)")
    parser.add_argument("--variant", choices=VARIANTS, default="dps", help="tuning variant (baseline: no attention losses)")
    parser.add_argument("--target", help="target prompt for edit (default: the pair's target prompt)")
    parser.add_argument("--guidance", type=float, help="guidance scale for edit (default: sampler.guidance)")
    parser.add_argument("--cache-attention", action="store_true", help="invert: keep attention matrices instead of recomputing")
    parser.add_argument("--force", action="store_true", help="recompute outputs even when up to date")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args) -> C.RunConfig:
    cfg = C.load(args.config) if args.config else C.RunConfig()
    if args.seed is not None:
        cfg = cfg.seeded(args.seed)
    if args.out is not None:
        d = cfg.to_dict()
        d["out"] = str(args.out)
        cfg = C.from_dict(d)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s",
                        stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        run = Run(cfg, args.pair, force=args.force)
        run.out.mkdir(parents=True, exist_ok=True)
        cfg.save(run.out / "config.json")
        result = COMMANDS[args.command](run, args)
    except (P.PrerequisiteError, C.ConfigError, CK.CheckpointError) as exc:
        print(f"miniweave {args.command}: error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(result, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
