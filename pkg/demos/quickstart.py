"""
Quickstart: the full command-line pipeline on a tiny model
==========================================================

Runs every ``miniweave`` command in order on a deliberately small model so
the whole chain finishes in well under a minute. The numbers are meaningless
at this size; the point is the artifact layout and the command order.

    python3 demos/quickstart.py --out /tmp/quickstart
"""

import argparse
import json
from pathlib import Path

from miniweave import cli

parser = argparse.ArgumentParser(description=__doc__.splitlines()[1])
parser.add_argument("--out", type=Path, default=Path("runs/quickstart"))
args = parser.parse_args()

# Any config key left out keeps its default.
tiny = {
    "out": str(args.out),
    "unet": {"channels": [16, 32], "groups": 4},
    "sampler": {"steps": 10},
    "base": {"steps": 20},
    "cati": {"steps": 10, "min_frames": 2, "max_frames": 4},
    "dps": {"epochs": 3},
    "inversion": {"refine": 2},
    "data": {"pair_seeds": [0], "concept_pairs": [0], "frames": 3, "concept_frames": 4},
}
args.out.mkdir(parents=True, exist_ok=True)
config = args.out / "tiny.json"
config.write_text(json.dumps(tiny, indent=2))

# Same as typing ``miniweave <command> --config tiny.json`` at a shell.
for command in ("synth", "pretrain", "train-cati", "train-dps", "invert", "edit", "eval"):
    print(f"$ miniweave {command} --config {config}")
    assert cli.main([command, "--config", str(config)]) == 0

# Reruns are cheap: phases whose checkpoint matches the config hash are skipped.
assert cli.main(["pretrain", "--config", str(config)]) == 0

print("artifacts:")
for path in sorted(p for p in args.out.rglob("*") if p.is_file() and not {"frames", "masks"} & set(p.parts)):
    print("   ", path.relative_to(args.out))
