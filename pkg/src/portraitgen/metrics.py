"""Evaluation metrics: landmark distance, sync confidence, image PSNR."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .corpus import AUDIO_PER_VIDEO, AudioFeatureSequence
from .syncexpert import SyncExpert

PSNR_INF_SENTINEL = 99.0  # serialized in place of infinite PSNR (zero MSE)


def landmark_distance(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean Euclidean distance per landmark: (T, 68, 3) vs (T, 68, 3)."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"landmark shapes differ: {pred.shape} vs {gt.shape}")
    return float(np.linalg.norm(pred - gt, axis=-1).mean())


def landmark_mse(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"landmark shapes differ: {pred.shape} vs {gt.shape}")
    return float(((pred - gt) ** 2).mean())


def sync_confidence(model: SyncExpert, frames: np.ndarray,
                    audio: AudioFeatureSequence, batch: int = 256) -> float:
    """Mean sync probability over all aligned sliding windows (stride 1).

    frames: (T, 68, 3) landmarks in the space the expert was trained on.
    """
    cfg = model.config
    t = frames.shape[0]
    half_l, half_a = cfg.lm_window // 2, cfg.audio_window // 2
    lo = max(half_l, (half_a + 1) // AUDIO_PER_VIDEO + 1)
    hi = t - half_l - half_a // AUDIO_PER_VIDEO - 1
    if hi <= lo:
        raise ValueError(f"sequence too short for sync windows: {t} frames")
    centers = np.arange(lo, hi)
    lws = np.stack([frames[c - half_l: c - half_l + cfg.lm_window] for c in centers])
    aws = np.stack([audio.features[AUDIO_PER_VIDEO * c - half_a:
                                   AUDIO_PER_VIDEO * c - half_a + cfg.audio_window]
                    for c in centers])
    model.set_training(False)
    probs = []
    with T.no_grad():
        for s in range(0, len(centers), batch):
            probs.append(model.sync_prob(lws[s:s + batch], aws[s:s + batch]).data)
    return float(np.concatenate(probs).mean())


def psnr(pred: np.ndarray, gt: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; inf when the images are identical."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"image shapes differ: {pred.shape} vs {gt.shape}")
    mse = float(((pred - gt) ** 2).mean())
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / mse))


def mean_psnr(preds, gts, peak: float = 1.0) -> float:
    vals = [psnr(p, g, peak) for p, g in zip(preds, gts)]
    return float(np.mean(vals))


def serialize_metric(value: float) -> float:
    """JSON-safe scalar: infinite PSNR maps to the sentinel, NaN is rejected."""
    if np.isnan(value):
        raise ValueError("metric value is NaN")
    if np.isinf(value):
        return PSNR_INF_SENTINEL
    return float(value)
