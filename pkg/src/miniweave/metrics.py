"""Frame consistency, masked PSNR and concept consistency."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from itertools import combinations

import numpy as np

from .codec import FeatureExtractor, resize, to_hwc

PSNR_CAP = 100.0


class MetricDataError(ValueError):
    pass


@dataclass
class MetricReport:
    frame_consistency: float
    m_psnr: float
    concept_consistency: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def mean_pairwise_cosine(features) -> float:
    feats = [np.asarray(v, dtype=np.float64) for v in features]
    if len(feats) < 2:
        raise MetricDataError("need at least two feature vectors")
    sims = [a @ b / (np.linalg.norm(a) * np.linalg.norm(b)) for a, b in combinations(feats, 2)]
    return float(np.mean(sims))


def frame_consistency(frames, extractor: FeatureExtractor | None = None) -> float:
    """Mean cosine similarity over all unordered pairs of distinct frames."""
    if len(frames) < 2:
        raise MetricDataError("frame consistency needs at least two frames")
    extractor = extractor or FeatureExtractor()
    return mean_pairwise_cosine([extractor(f) for f in frames])


def quantize(video: np.ndarray) -> np.ndarray:
    """[0, 1] floats -> integer-valued 0..255 floats."""
    return np.round(np.clip(np.asarray(video, dtype=np.float64), 0.0, 1.0) * 255.0)


def masked_mse(source: np.ndarray, edited: np.ndarray, mask: np.ndarray) -> float:
    """Channel-mean squared error over pixels where ``mask`` is 0; frames are (C, H, W)."""
    keep = 1.0 - np.asarray(mask, dtype=np.float64)
    denom = keep.sum()
    if denom == 0:
        raise MetricDataError("mask covers the whole frame; M-PSNR is undefined")
    diff2 = (np.asarray(source, np.float64) - np.asarray(edited, np.float64)) ** 2
    return float((diff2 * keep[None]).sum() / denom / diff2.shape[0])


def m_psnr(source: np.ndarray, edited: np.ndarray, masks: np.ndarray, quantized: bool = False) -> float:
    """Mean over frames of 10 log10(255^2 / masked MSE), capped at 100 dB.

    ``source``/``edited`` are (F, C, H, W); unless ``quantized`` they are taken
    as [0, 1] floats and quantised to 8 bits first. ``masks`` is (F, H, W) or (H, W).
    """
    source, edited = np.asarray(source), np.asarray(edited)
    if source.shape != edited.shape:
        raise MetricDataError(f"shape mismatch {source.shape} vs {edited.shape}")
    if not quantized:
        source, edited = quantize(source), quantize(edited)
    masks = np.asarray(masks)
    if masks.ndim == 2:
        masks = np.broadcast_to(masks, (source.shape[0],) + masks.shape)
    scores = []
    for s, e, m in zip(source, edited, masks):
        f = masked_mse(s, e, m)
        scores.append(PSNR_CAP if f == 0 else min(PSNR_CAP, 10.0 * np.log10(255.0**2 / f)))
    return float(np.mean(scores))


def crop_to_mask(frame: np.ndarray, mask: np.ndarray, size: int = 32) -> np.ndarray:
    """Bounding-box crop of the masked object (background zeroed), resized to ``size``."""
    img = to_hwc(frame)
    rows, cols = np.nonzero(np.asarray(mask) > 0)
    if not len(rows):
        raise MetricDataError("empty object mask")
    r0, r1, c0, c1 = rows.min(), rows.max() + 1, cols.min(), cols.max() + 1
    crop = img[r0:r1, c0:c1] * (np.asarray(mask)[r0:r1, c0:c1, None] > 0)
    return resize(crop, size, size)


def concept_consistency(edited: np.ndarray, edited_masks: np.ndarray, concept: np.ndarray, concept_masks: np.ndarray,
                        extractor: FeatureExtractor | None = None) -> float:
    """Mean cosine between object-crop features of every (edited frame, concept frame) pair."""
    extractor = extractor or FeatureExtractor()
    a = [extractor(crop_to_mask(f, m, extractor.size)) for f, m in zip(edited, edited_masks)]
    b = [extractor(crop_to_mask(f, m, extractor.size)) for f, m in zip(concept, concept_masks)]
    sims = [float(u @ v) for u in a for v in b]
    return float(np.mean(sims))
