"""Deterministic synthetic videos with exact object masks, plus PPM/PGM corpus I/O."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

COLORS = {
    "red": (0.90, 0.12, 0.10),
    "green": (0.10, 0.75, 0.20),
    "blue": (0.12, 0.28, 0.95),
    "yellow": (0.95, 0.85, 0.10),
    "purple": (0.60, 0.15, 0.80),
    "orange": (1.00, 0.55, 0.05),
}
SHAPES = ("square", "disc", "triangle")
BACKGROUNDS = ("stripes", "gradient")
TEXTURES = ("solid", "checker", "ring")
BASE_WORDS = ["a", "video", "of", "moving", "on", *COLORS, *SHAPES, *BACKGROUNDS]


@dataclass
class SceneSpec:
    """One moving object over a patterned background."""

    size: int = 64
    background: str = "stripes"
    shape: str = "square"
    color: str = "red"
    texture: str = "solid"
    color2: str = "yellow"
    radius: float = 10.0
    trajectory: str = "linear"  # linear | circular | static
    start: tuple = (20.0, 20.0)  # (row, col) of the object centre
    end: tuple = (44.0, 44.0)
    frames: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.shape not in SHAPES or self.background not in BACKGROUNDS or self.texture not in TEXTURES:
            raise ValueError(f"unsupported scene {self.shape}/{self.background}/{self.texture}")
        if self.color not in COLORS or self.color2 not in COLORS:
            raise ValueError(f"unknown colour {self.color!r} or {self.color2!r}")
        lo, hi = self.radius + 1, self.size - self.radius - 2
        for p in (self.start, self.end):
            if not (lo <= p[0] <= hi and lo <= p[1] <= hi):
                raise ValueError(f"object centre {p} leaves the canvas for radius {self.radius}")

    @classmethod
    def random(cls, seed: int, **fixed) -> "SceneSpec":
        rng = np.random.default_rng(seed)
        radius = float(fixed.pop("radius", rng.uniform(8.0, 12.0)))
        size = int(fixed.get("size", 64))
        lo, hi = radius + 1, size - radius - 2
        start = tuple(float(v) for v in rng.uniform(lo, hi, 2))
        end = tuple(float(v) for v in rng.uniform(lo, hi, 2))
        params = dict(
            background=str(rng.choice(BACKGROUNDS)),
            shape=str(rng.choice(SHAPES)),
            color=str(rng.choice(list(COLORS))),
            radius=radius,
            trajectory="linear",
            start=start,
            end=end,
            seed=seed,
        )
        params.update(fixed)
        return cls(**params)

    def centres(self) -> np.ndarray:
        f = self.frames
        s = np.linspace(0.0, 1.0, f) if f > 1 else np.zeros(1)
        p0, p1 = np.asarray(self.start), np.asarray(self.end)
        if self.trajectory == "static":
            return np.repeat(p0[None], f, axis=0)
        if self.trajectory == "linear":
            return p0 + s[:, None] * (p1 - p0)
        if self.trajectory == "circular":
            mid = (p0 + p1) / 2
            rad = np.linalg.norm(p1 - p0) / 2
            ang = 2 * np.pi * s * (f - 1) / max(f, 1)
            c = mid + rad * np.stack([np.sin(ang), np.cos(ang)], axis=1)
            lo, hi = self.radius + 1, self.size - self.radius - 2
            return np.clip(c, lo, hi)
        raise ValueError(f"unknown trajectory {self.trajectory!r}")

    def prompt(self) -> str:
        return f"a {self.color} {self.shape} moving on {self.background}"


def background(spec: SceneSpec) -> np.ndarray:
    """(3, H, W) background, muted so objects always stand out."""
    rng = np.random.default_rng(10_000 + spec.seed)
    n = spec.size
    yy, xx = np.mgrid[0:n, 0:n] / (n - 1)
    base = rng.uniform(0.35, 0.55, 3)
    other = base + rng.uniform(-0.12, 0.12, 3)
    if spec.background == "gradient":
        w = (0.6 * yy + 0.4 * xx)[None]
        img = base[:, None, None] * (1 - w) + other[:, None, None] * w
    else:
        period = 8
        stripe = (((np.arange(n)[:, None] + np.arange(n)[None, :]) // (period // 2)) % 2).astype(float)[None]
        img = base[:, None, None] * (1 - stripe) + (base[:, None, None] - 0.2) * stripe
    return np.clip(img, 0.0, 1.0)


def shape_mask(shape: str, centre, radius: float, n: int) -> np.ndarray:
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    dy, dx = yy - centre[0], xx - centre[1]
    if shape == "square":
        return (np.abs(dy) <= radius) & (np.abs(dx) <= radius)
    if shape == "disc":
        return dy * dy + dx * dx <= radius * radius
    if shape == "triangle":
        # apex up, base 2r, height 2r
        inside_y = (dy >= -radius) & (dy <= radius)
        half_width = (dy + radius) / 2.0
        return inside_y & (np.abs(dx) <= half_width)
    raise ValueError(shape)


def shape_area(shape: str, radius: float) -> float:
    return {"square": 4 * radius**2, "disc": np.pi * radius**2, "triangle": 2 * radius**2}[shape]


def render(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Render to ``(video (F, 3, H, W) in [0, 1], masks (F, H, W) in {0, 1})``."""
    bg = background(spec)
    n = spec.size
    yy, xx = np.mgrid[0:n, 0:n]
    frames, masks = [], []
    c1 = np.asarray(COLORS[spec.color])[:, None, None]
    c2 = np.asarray(COLORS[spec.color2])[:, None, None]
    for centre in spec.centres():
        m = shape_mask(spec.shape, centre, spec.radius, n)
        if spec.texture == "checker":
            pattern = (((yy - int(centre[0])) // 4 + (xx - int(centre[1])) // 4) % 2).astype(bool)
        elif spec.texture == "ring":
            r = np.hypot(yy + 0.5 - centre[0], xx + 0.5 - centre[1])
            pattern = (r // 3) % 2 == 1
        else:
            pattern = np.zeros((n, n), bool)
        obj = np.where(pattern[None], c2, c1)
        frames.append(np.where(m[None], obj, bg))
        masks.append(m.astype(np.float32))
    return np.stack(frames).astype(np.float32), np.stack(masks)


def bbox_masks(masks: np.ndarray) -> np.ndarray:
    """Per-frame axis-aligned bounding boxes of binary masks (detector-style masks)."""
    out = np.zeros_like(masks)
    for i, m in enumerate(masks):
        rows, cols = np.nonzero(m)
        if len(rows):
            out[i, rows.min() : rows.max() + 1, cols.min() : cols.max() + 1] = 1
    return out


@dataclass
class EditingPair:
    """A source scene, the word-swapped target prompt, and an optional concept scene."""

    source: SceneSpec
    source_prompt: str
    target_prompt: str
    swapped: tuple  # (source word, target word)
    concept: SceneSpec | None = None
    concept_prompt: str | None = None
    concept_token: str | None = None
    name: str = "pair"

    def __post_init__(self):
        s, t = self.source_prompt.split(), self.target_prompt.split()
        diff = [(a, b) for a, b in zip(s, t) if a != b]
        if len(s) != len(t) or diff != [tuple(self.swapped)]:
            raise ValueError(f"target prompt must differ from source exactly by {self.swapped}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["swapped"] = list(self.swapped)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EditingPair":
        d = dict(d)
        d["source"] = _spec_from_dict(d["source"])
        if d.get("concept"):
            d["concept"] = _spec_from_dict(d["concept"])
        d["swapped"] = tuple(d["swapped"])
        return cls(**d)


def _spec_from_dict(d: dict) -> SceneSpec:
    d = dict(d)
    d["start"], d["end"] = tuple(d["start"]), tuple(d["end"])
    return SceneSpec(**d)


def make_pair(seed: int, frames: int = 6, concept: str | None = None, prefix: str = "a video of") -> EditingPair:
    """Seeded word-swap pair: swap the shape (or insert ``concept`` in its place)."""
    rng = np.random.default_rng(seed)
    src = SceneSpec.random(seed, frames=frames, texture="solid")
    if concept is None:
        new_shape = str(rng.choice([s for s in SHAPES if s != src.shape]))
        target = src.prompt().replace(src.shape, new_shape)
        return EditingPair(src, src.prompt(), target, (src.shape, new_shape), name=f"pair{seed}")
    cspec = concept_scene(seed + 1, frames=8)
    target = src.prompt().replace(src.shape, concept)
    cprompt = f"{prefix} a {cspec.color} {concept} moving on {cspec.background}".strip()
    return EditingPair(src, src.prompt(), target, (src.shape, concept), cspec, cprompt, concept, name=f"pair{seed}")


def concept_scene(seed: int, frames: int = 8) -> SceneSpec:
    """The concept object: an orange, blue-ringed disc unseen during base training."""
    return SceneSpec.random(seed, frames=frames, shape="disc", color="orange", texture="ring", color2="blue",
                            radius=11.0)


def caption_sampler(frames: int = 3, textures=("solid", "checker"), prefix: str = "a video of", prefix_rate: float = 0.5):
    """Callable ``rng -> (video, prompt)`` over random captioned scenes, for fitting the base model."""

    def draw(rng: np.random.Generator):
        spec = SceneSpec.random(int(rng.integers(2**31)), frames=frames, texture=str(rng.choice(textures)),
                                color2=str(rng.choice(list(COLORS))))
        if rng.random() < 0.25:
            spec = replace(spec, trajectory="static")
        prompt = spec.prompt()
        if prefix and rng.random() < prefix_rate:
            prompt = f"{prefix} {prompt}"
        return render(spec)[0], prompt

    return draw


# -- corpus I/O -------------------------------------------------------------

def write_ppm(path, image: np.ndarray) -> None:
    """(3, H, W) float in [0, 1] -> binary PPM (P6)."""
    img = np.clip(np.round(np.asarray(image).transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + img.tobytes())


def write_pgm(path, mask: np.ndarray) -> None:
    img = (np.asarray(mask) > 0).astype(np.uint8) * 255
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + img.tobytes())


def _read_pnm(path, magic: bytes) -> tuple[np.ndarray, int, int]:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != magic:
        raise ValueError(f"{path}: expected {magic!r}, found {fields[0]!r}")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit images are supported")
    return np.frombuffer(raw[pos + 1 :], dtype=np.uint8), w, h


def read_ppm(path) -> np.ndarray:
    data, w, h = _read_pnm(path, b"P6")
    return data[: h * w * 3].reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / 255.0


def read_pgm(path) -> np.ndarray:
    data, w, h = _read_pnm(path, b"P5")
    return (data[: h * w].reshape(h, w) > 127).astype(np.float32)


def write_video(directory, video: np.ndarray, masks: np.ndarray | None = None) -> None:
    d = Path(directory)
    (d / "frames").mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(video):
        write_ppm(d / "frames" / f"{i:03d}.ppm", frame)
    if masks is not None:
        (d / "masks").mkdir(exist_ok=True)
        for i, m in enumerate(masks):
            write_pgm(d / "masks" / f"{i:03d}.pgm", m)


def read_video(directory) -> tuple[np.ndarray, np.ndarray | None]:
    d = Path(directory)
    video = np.stack([read_ppm(p) for p in sorted((d / "frames").glob("*.ppm"))])
    mask_files = sorted((d / "masks").glob("*.pgm")) if (d / "masks").exists() else []
    masks = np.stack([read_pgm(p) for p in mask_files]) if mask_files else None
    return video, masks


def scene_id(spec: SceneSpec) -> str:
    blob = json.dumps(asdict(spec), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def make_corpus(pairs: list[EditingPair], root, vocab_tokens: list[str]) -> dict:
    """Write every scene of ``pairs`` under ``root`` plus ``vocab.json`` and ``manifest.json``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {"pairs": []}
    for pair in pairs:
        entry = pair.to_dict()
        for role, spec, prompt in (("source", pair.source, pair.source_prompt), ("concept", pair.concept, pair.concept_prompt)):
            if spec is None:
                continue
            sid = scene_id(spec)
            video, masks = render(spec)
            write_video(root / sid, video, masks)
            (root / sid / "prompt.json").write_text(json.dumps({"prompt": prompt, "spec": asdict(spec)}, indent=1))
            entry[f"{role}_id"] = sid
        manifest["pairs"].append(entry)
    (root / "vocab.json").write_text(json.dumps(vocab_tokens))
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest
