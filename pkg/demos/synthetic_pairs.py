"""
Synthetic editing pairs
=======================

Every experiment in this package runs on procedurally drawn videos: a coloured
shape moving over a textured background, with an exact object mask per frame.
This script draws the default pairs, prints their prompts, and writes frames
and masks as PPM/PGM files you can open in any image viewer.

    python3 demos/synthetic_pairs.py --out /tmp/pairs
"""

import argparse
from pathlib import Path

import numpy as np

from miniweave import scenes as S
from miniweave.config import RunConfig
from miniweave.pipeline import make_pairs

parser = argparse.ArgumentParser(description=__doc__.splitlines()[1])
parser.add_argument("--out", type=Path, default=Path("pairs"))
args = parser.parse_args()

cfg = RunConfig()

# A pair is a source scene plus a target prompt that swaps one word.
# Concept pairs also carry a short concept video for the learned token.
for pair in make_pairs(cfg):
    video, masks = S.render(pair.source)
    print(f"{pair.name}: {pair.source_prompt!r} -> {pair.target_prompt!r}")
    print(f"    {video.shape[0]} frames, object covers {masks.mean():.1%} of the pixels")
    S.write_video(args.out / pair.name / "source", video, masks)
    if pair.concept is not None:
        cvideo, cmasks = S.render(pair.concept)
        print(f"    concept prompt {pair.concept_prompt!r} ({cvideo.shape[0]} frames)")
        S.write_video(args.out / pair.name / "concept", cvideo, cmasks)

# M-PSNR scores only the pixels outside the object's bounding box,
# so the boxes are what an edit must leave alone.
pair = make_pairs(cfg)[0]
_, masks = S.render(pair.source)
boxes = S.bbox_masks(masks)
print(f"bounding boxes cover {boxes.mean():.1%} of {pair.name}; masks cover {masks.mean():.1%}")
assert np.all(boxes >= masks)
print(f"frames written under {args.out}")
