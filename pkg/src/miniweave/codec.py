"""Frozen, seeded stand-ins for the autoencoder, text encoder and visual encoder."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .nn import Parameter

PATCH = 4
PAD, EMPTY = "<pad>", "<empty>"

ROLE_BASE, ROLE_CONCEPT, ROLE_REPLACED, ROLE_TARGET, ROLE_PAD = "base", "concept", "replaced", "target", "pad"


class ShapeError(ValueError):
    pass


class VocabularyError(KeyError):
    pass


def _orthogonal(n: int, seed: int) -> np.ndarray:
    q, r = np.linalg.qr(np.random.default_rng(seed).standard_normal((n, n)))
    return q * np.sign(np.diag(r))


class LatentCodec:
    """Exactly invertible space-to-depth (4x4) followed by an orthogonal channel mix.

    ``encode`` maps (F, 3, H, W) pixels to (F, 48, H/4, W/4) latents and is linear.
    """

    def __init__(self, seed: int = 0, channels: int = 3):
        self.channels = channels
        self.latent_channels = channels * PATCH * PATCH
        self.mixer = _orthogonal(self.latent_channels, seed)

    def encode(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4:
            raise ShapeError(f"encode expects (F, {self.channels}, H, W); got {x.shape}")
        f, c, h, w = x.shape
        if c != self.channels or h % PATCH or w % PATCH:
            raise ShapeError(f"encode expects (F, {self.channels}, H, W) with H, W divisible by {PATCH}; got {x.shape}")
        s2d = x.reshape(f, c, h // PATCH, PATCH, w // PATCH, PATCH).transpose(0, 1, 3, 5, 2, 4)
        s2d = s2d.reshape(f, self.latent_channels, h // PATCH, w // PATCH)
        z = np.einsum("ij,fjhw->fihw", self.mixer, s2d)
        return z.astype(np.float32)

    def decode(self, z: np.ndarray, clamp: bool = True) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 4 or z.shape[1] != self.latent_channels:
            raise ShapeError(f"decode expects (F, {self.latent_channels}, h, w); got {z.shape}")
        f, _, h, w = z.shape
        s2d = np.einsum("ji,fjhw->fihw", self.mixer, z)
        x = s2d.reshape(f, self.channels, PATCH, PATCH, h, w).transpose(0, 1, 4, 2, 5, 3)
        x = x.reshape(f, self.channels, h * PATCH, w * PATCH)
        if clamp:
            x = np.clip(x, 0.0, 1.0)
        return x.astype(np.float32)


class Vocabulary:
    """Whitespace tokens to dense ids; ids 0 and 1 are reserved (padding, empty prompt)."""

    def __init__(self, tokens):
        words = [PAD, EMPTY] + [t for t in dict.fromkeys(tokens) if t not in (PAD, EMPTY)]
        self.tokens = words
        self.ids = {t: i for i, t in enumerate(words)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.ids

    @property
    def pad_id(self) -> int:
        return 0

    def tokenize(self, prompt: str) -> list[int]:
        out = []
        for word in prompt.split():
            if word not in self.ids:
                raise VocabularyError(f"unknown token {word!r}")
            out.append(self.ids[word])
        return out

    def concept_tokens(self) -> list[str]:
        return [t for t in self.tokens if t.startswith("$")]

    def to_json(self) -> str:
        return json.dumps(self.tokens[2:])

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        return cls(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_json(Path(path).read_text())


@dataclass
class PromptEmbedding:
    """Token-wise embedding (max_len x dim) plus the ids and per-token roles."""

    tokens: T.Tensor
    ids: list[int]
    roles: list[str] = field(default_factory=list)
    words: list[str] = field(default_factory=list)

    @property
    def length(self) -> int:
        return sum(1 for r in self.roles if r != ROLE_PAD)

    def positions(self, *roles: str) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r in roles]


def sinusoidal(n: int, dim: int, base: float = 10000.0) -> np.ndarray:
    pos = np.arange(n)[:, None]
    freqs = np.exp(-np.log(base) * np.arange(0, dim, 2) / dim)[None]
    out = np.zeros((n, dim))
    out[:, 0::2] = np.sin(pos * freqs)
    out[:, 1::2] = np.cos(pos * freqs)
    return out


class TextEncoder:
    """Frozen token + positional tables and a frozen mixing layer; concept slots are trainable.

    Each output row is ``(embedding + position) @ mixer.T`` where ``embedding``
    comes from the base table, or from the concept slot for ``$`` tokens.
    """

    def __init__(self, vocab: Vocabulary, dim: int = 64, max_length: int = 16, seed: int = 0,
                 prefix: str = "a video of"):
        rng = np.random.default_rng(seed)
        self.vocab, self.dim, self.max_length, self.prefix = vocab, dim, max_length, prefix
        self.base = T.Tensor(rng.standard_normal((len(vocab), dim)).astype(np.float32))
        self.position = T.Tensor((0.5 * sinusoidal(max_length, dim)).astype(np.float32))
        self.mixer = T.Tensor(_orthogonal(dim, seed + 1).astype(np.float32))
        self.slots: dict[str, Parameter] = {}

    def add_concept(self, token: str, initializer: str) -> Parameter:
        if not token.startswith("$"):
            raise VocabularyError(f"concept tokens start with '$': {token!r}")
        if token not in self.vocab or initializer not in self.vocab:
            raise VocabularyError(f"{token!r} or {initializer!r} missing from vocabulary")
        slot = Parameter(self.base.data[self.vocab.ids[initializer]].copy())
        self.slots[token] = slot
        return slot

    def tokenize(self, prompt: str) -> list[int]:
        ids = self.vocab.tokenize(prompt)
        if len(ids) > self.max_length:
            raise VocabularyError(f"prompt has {len(ids)} tokens; max is {self.max_length}")
        return ids + [self.vocab.pad_id] * (self.max_length - len(ids))

    def concept_prompt(self, words: str) -> str:
        return f"{self.prefix} {words}".strip() if self.prefix else words

    def encode_prompt(self, prompt, roles: list[str] | None = None) -> PromptEmbedding:
        """Encode a prompt string (or a padded id list) into a ``PromptEmbedding``."""
        ids = self.tokenize(prompt) if isinstance(prompt, str) else list(prompt)
        if len(ids) < self.max_length:
            ids = ids + [self.vocab.pad_id] * (self.max_length - len(ids))
        if len(ids) > self.max_length:
            raise VocabularyError(f"prompt has {len(ids)} tokens; max is {self.max_length}")
        words = [self.vocab.tokens[i] if 0 <= i < len(self.vocab) else None for i in ids]
        if None in words:
            raise VocabularyError(f"unknown token id in {ids}")

        rows = []
        run_start = 0
        for i, word in enumerate(words):
            if word.startswith("$"):
                if word not in self.slots:
                    raise VocabularyError(f"concept {word!r} has no slot")
                if run_start < i:
                    rows.append(T.take(self.base, ids[run_start:i], axis=0))
                rows.append(T.reshape(self.slots[word], (1, self.dim)))
                run_start = i + 1
        if run_start < len(ids):
            rows.append(T.take(self.base, ids[run_start:], axis=0))
        table = rows[0] if len(rows) == 1 else T.concat(rows, axis=0)
        tokens = T.linear(T.add(table, self.position), self.mixer)

        if roles is None:
            roles = [ROLE_PAD if i == self.vocab.pad_id else ROLE_CONCEPT if w.startswith("$") else ROLE_BASE
                     for i, w in zip(ids, words)]
        if len(roles) != self.max_length:
            roles = list(roles) + [ROLE_PAD] * (self.max_length - len(roles))
        return PromptEmbedding(tokens, ids, list(roles), words)

    def empty(self) -> PromptEmbedding:
        return self.encode_prompt([self.vocab.pad_id] * self.max_length)


class FeatureExtractor:
    """Frozen strided-conv stack: RGB image -> unit vector (128).

    No biases and ReLU activations; an all-zero image maps to the first basis vector.
    """

    def __init__(self, seed: int = 0, size: int = 32, dim: int = 128):
        rng = np.random.default_rng(seed)
        self.size, self.dim = size, dim
        chans = [3, 16, 32, 64]
        self.kernels = [rng.standard_normal((3, 3, a, b)) * np.sqrt(2.0 / (9 * a)) for a, b in zip(chans, chans[1:])]
        flat = chans[-1] * (size // 8) ** 2
        self.head = rng.standard_normal((flat, dim)) / np.sqrt(flat)

    def __call__(self, image: np.ndarray) -> np.ndarray:
        x = resize(to_hwc(image), self.size, self.size)[None].astype(np.float64)
        with T.no_grad():
            h = T.Tensor(x)
            for k in self.kernels:
                h = T.conv2d(h, T.Tensor(k), stride=2, padding=1)
                h = T.Tensor(np.maximum(h.data, 0.0))
        v = h.data.reshape(-1) @ self.head
        n = np.linalg.norm(v)
        if n < 1e-12:
            out = np.zeros(self.dim)
            out[0] = 1.0
            return out
        return v / n


def to_hwc(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[0] == 3 and image.shape[-1] != 3:
        image = image.transpose(1, 2, 0)
    return image


def resize(image: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resize of an (H, W, C) image, pixel-centre aligned."""
    src_h, src_w = image.shape[:2]
    ys = np.clip((np.arange(h) + 0.5) * src_h / h - 0.5, 0, src_h - 1)
    xs = np.clip((np.arange(w) + 0.5) * src_w / w - 0.5, 0, src_w - 1)
    y0, x0 = np.floor(ys).astype(int), np.floor(xs).astype(int)
    y1, x1 = np.minimum(y0 + 1, src_h - 1), np.minimum(x0 + 1, src_w - 1)
    wy, wx = (ys - y0)[:, None, None], (xs - x0)[None, :, None]
    top = image[y0][:, x0] * (1 - wx) + image[y0][:, x1] * wx
    bot = image[y1][:, x0] * (1 - wx) + image[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy
