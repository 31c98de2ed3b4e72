"""
Where does a word look?
=======================

Loads a tuned checkpoint, runs the denoiser once on a noised copy of the
pair's source video, and writes the head-averaged cross-attention map of the
edited word for every frame and layer as greyscale PGM images. Comparing the
maps of a ``dps`` and a ``baseline`` checkpoint shows the confinement effect.

    miniweave all --out runs/default
    python3 demos/attention_maps.py runs/default/pair0/dps/model.mwv --out /tmp/maps
"""

import argparse
from pathlib import Path

import numpy as np

from miniweave import checkpoint as CK
from miniweave import pipeline as P
from miniweave import tensor as T
from miniweave import training as TR
from miniweave.config import RunConfig, load

parser = argparse.ArgumentParser(description=__doc__.splitlines()[1])
parser.add_argument("checkpoint", type=Path)
parser.add_argument("--config", type=Path)
parser.add_argument("--pair", type=int, default=0)
parser.add_argument("--t", type=int, default=500, help="noise level of the probe")
parser.add_argument("--out", type=Path, default=Path("maps"))
args = parser.parse_args()

cfg = load(args.config) if args.config else RunConfig()
models = P.build_models(cfg)
P.load_state(models, CK.load(args.checkpoint)[0])
pair = {p.name: p for p in P.make_pairs(cfg)}[f"pair{args.pair}"]
pd = P.load_pair(models, pair)

# Probe with the target prompt: this is the word that has to stay on the object.
word = pair.swapped[1]
positions = list(pd.target_positions)
cond = models.encoder.encode_prompt(pair.target_prompt)
eps = np.random.default_rng(0).standard_normal(pd.latents.shape).astype(np.float32)
with T.no_grad():
    _, record = models.unet.predict_noise(models.schedule.add_noise(pd.latents, eps, args.t), args.t, cond, record=True)



def write_grey(path: Path, image: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    img = np.clip(np.round(image * 255), 0, 255).astype(np.uint8)
    path.write_bytes(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]) + img.tobytes())


masks = TR.pool_masks(pd.masks, models.unet.cfg.resolutions)
for layer in models.unet.cross_layer_names():
    probs = record[layer].data  # (frames, heads, pixels, tokens)
    side = int(round(np.sqrt(probs.shape[2])))
    amap = probs[..., positions].mean(axis=(1, 3)).reshape(-1, side, side)
    gt = masks.levels[side]
    inside = (amap * gt).sum() / amap.sum()
    print(f"{layer:16} {side:2}x{side:<2} share of {word!r} attention on the object: {inside:.1%}")
    for f, frame in enumerate(amap):
        write_grey(args.out / layer / f"{f:03d}.pgm", frame / max(frame.max(), 1e-12))
print(f"maps written under {args.out}")
