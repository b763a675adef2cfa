"""Audio/landmark synchronization expert.

Two convolutional encoders embed a short landmark window and the matching
audio clip; the in-sync probability is their cosine similarity with an
epsilon-floored denominator, clamped to [0, 1], trained with binary
cross-entropy on aligned vs. shifted/mismatched pairs. Once trained it is
frozen and used to guide the motion generator and the post-net, so its
forward pass must stay differentiable w.r.t. the landmark input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint as ckpt
from . import geometry as geo
from . import nn
from . import tensor as T
from .corpus import AUDIO_PER_VIDEO, Utterance


@dataclass
class SyncExpertConfig:
    lm_window: int = 5        # landmark frames per window
    audio_window: int = 10    # audio feature frames per window
    feature_dim: int = 64
    layers: int = 14          # conv layers, split across the two encoders
    channels: int = 512
    embed_dim: int = 64
    eps: float = 1e-8

    def __post_init__(self):
        if self.layers < 2 or self.channels < 1 or self.embed_dim < 1:
            raise ValueError("sync-expert config values must be positive")


class _WindowEncoder(nn.Module):
    """Conv1d + batch-norm + ReLU stack, mean-pooled to an embedding."""

    def __init__(self, cin: int, channels: int, layers: int, embed: int,
                 rng: np.random.Generator):
        self.convs = [nn.Conv1d(cin if i == 0 else channels, channels, 3, rng=rng)
                      for i in range(layers)]
        self.norms = [nn.BatchNorm1d(channels) for _ in range(layers)]
        self.head = nn.Affine(channels, embed, rng=rng)

    def __call__(self, x):
        h = x
        for conv, norm in zip(self.convs, self.norms):
            h = T.relu(norm(conv(h)))
        pooled = T.tmean(h, axis=2)
        return self.head(pooled)


class SyncExpert(nn.Module):
    def __init__(self, config: SyncExpertConfig, seed: int = 0):
        rng = np.random.default_rng([seed, 31])
        per = max(1, config.layers // 2)
        self.config = config
        self.lm_encoder = _WindowEncoder(geo.NUM_LANDMARKS * 3, config.channels, per,
                                         config.embed_dim, rng)
        self.audio_encoder = _WindowEncoder(config.feature_dim, config.channels, per,
                                            config.embed_dim, rng)

    def sync_prob(self, lm_window, audio_window):
        """In-sync probability in [0, 1].

        lm_window: (B, T_l, 68, 3) array or Tensor; audio_window: (B, T_a, D).
        Differentiable w.r.t. both inputs; never NaN (epsilon floor).
        """
        lm = lm_window if isinstance(lm_window, T.Tensor) else T.Tensor(np.asarray(lm_window))
        au = audio_window if isinstance(audio_window, T.Tensor) else T.Tensor(np.asarray(audio_window))
        b = lm.shape[0]
        if lm.shape[1] != self.config.lm_window or au.shape[1] != self.config.audio_window:
            raise T.ShapeError(
                f"sync window sizes {lm.shape} / {au.shape} do not match config "
                f"({self.config.lm_window}, {self.config.audio_window})")
        lm = T.transpose(T.reshape(lm, (b, self.config.lm_window, -1)), (0, 2, 1))
        au = T.transpose(au, (0, 2, 1))
        e_l = self.lm_encoder(lm)
        e_a = self.audio_encoder(au)
        dot = T.tsum(T.mul(e_a, e_l), axis=1)
        # 1e-24 keeps sqrt differentiable at exactly-zero embeddings
        na = T.power(T.tsum(T.mul(e_a, e_a), axis=1) + 1e-24, 0.5)
        nl = T.power(T.tsum(T.mul(e_l, e_l), axis=1) + 1e-24, 0.5)
        eps = self.config.eps
        denom = T.relu(T.mul(na, nl) - eps) + eps  # max(|a||l|, eps)
        cos = T.mul(dot, T.power(denom, -1.0))
        return T.relu(cos)  # cos <= 1 by Cauchy-Schwarz; clamp negatives to 0

    def save(self, path) -> None:
        arrays = self.state_arrays()
        ckpt.save_arrays(path, arrays, meta={"config": vars(self.config)})

    @classmethod
    def load(cls, path) -> "SyncExpert":
        arrays, meta = ckpt.load_arrays(path)
        model = cls(SyncExpertConfig(**meta["config"]))
        model.load_state_arrays(arrays)
        model.set_training(False)
        return model


def bce_loss(prob: T.Tensor, labels: np.ndarray, clip: float = 1e-7) -> T.Tensor:
    """Binary cross-entropy on probabilities (clipped away from {0, 1})."""
    # clip without killing gradients: p' = p*(1-2c) + c
    p = T.add(T.mul(prob, 1.0 - 2.0 * clip), clip)
    y = T.Tensor(np.asarray(labels, dtype=np.float64))
    return T.tmean(-(T.mul(y, T.tlog(p)) + T.mul(1.0 - y, T.tlog(1.0 - p))))


def _window_at(utt: Utterance, t: int, cfg: SyncExpertConfig,
               frames: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    lm_src = frames if frames is not None else utt.landmarks.frames
    lw = lm_src[t - cfg.lm_window // 2: t - cfg.lm_window // 2 + cfg.lm_window]
    a0 = AUDIO_PER_VIDEO * t - cfg.audio_window // 2
    aw = utt.audio.features[a0:a0 + cfg.audio_window]
    return lw, aw


def _valid_center_range(utt: Utterance, cfg: SyncExpertConfig) -> tuple[int, int]:
    lo = max(cfg.lm_window // 2, (cfg.audio_window // 2 + 1) // AUDIO_PER_VIDEO + 1)
    hi = len(utt.landmarks) - cfg.lm_window // 2 - cfg.audio_window // 2 // AUDIO_PER_VIDEO - 1
    return lo, hi


def sample_batch(utterances: list[Utterance], cfg: SyncExpertConfig, batch: int,
                 rng: np.random.Generator,
                 negative_offset_range: tuple[int, int] = (10, 40)):
    """Half positive (aligned), half negative (time-shifted or cross-utterance)."""
    lms = np.empty((batch, cfg.lm_window, geo.NUM_LANDMARKS, 3))
    aus = np.empty((batch, cfg.audio_window, cfg.feature_dim))
    labels = np.empty(batch)
    for i in range(batch):
        utt = utterances[rng.integers(0, len(utterances))]
        lo, hi = _valid_center_range(utt, cfg)
        positive = i % 2 == 0
        labels[i] = 1.0 if positive else 0.0
        if positive:
            t = int(rng.integers(lo, hi))
            lw, aw = _window_at(utt, t, cfg)
        elif rng.random() < 0.5 and len(utterances) > 1:
            # cross-utterance mismatch
            other = utterances[rng.integers(0, len(utterances))]
            while other is utt:
                other = utterances[rng.integers(0, len(utterances))]
            t = int(rng.integers(lo, hi))
            lw, _ = _window_at(utt, t, cfg)
            lo2, hi2 = _valid_center_range(other, cfg)
            _, aw = _window_at(other, int(rng.integers(lo2, hi2)), cfg)
        else:
            max_off = hi - lo - 1
            if max_off < 1:
                raise ValueError("utterance too short for shifted negatives")
            off = min(int(rng.integers(*negative_offset_range)), max_off)
            off *= 1 if rng.random() < 0.5 else -1
            t = int(rng.integers(max(lo, lo - off), min(hi, hi - off)))
            lw, _ = _window_at(utt, t, cfg)
            _, aw = _window_at(utt, t + off, cfg)
        lms[i], aus[i] = lw, aw
    return lms, aus, labels


def evaluate_accuracy(model: SyncExpert, utterances: list[Utterance], num: int,
                      rng: np.random.Generator, min_offset: int = 10,
                      flip_labels: bool = False) -> float:
    model.set_training(False)
    cfg = model.config
    lms, aus, labels = sample_batch(utterances, cfg, num, rng,
                                    negative_offset_range=(min_offset, min_offset + 30))
    with T.no_grad():
        prob = model.sync_prob(lms, aus).data
    pred = (prob > 0.5).astype(np.float64)
    if flip_labels:
        labels = 1.0 - labels
    return float((pred == labels).mean())


def mean_sync_at_offset(model: SyncExpert, utterances: list[Utterance], offset: int,
                        num: int, rng: np.random.Generator) -> float:
    """Average sync_prob over pairs whose audio is shifted by `offset` frames."""
    model.set_training(False)
    cfg = model.config
    lms = np.empty((num, cfg.lm_window, geo.NUM_LANDMARKS, 3))
    aus = np.empty((num, cfg.audio_window, cfg.feature_dim))
    for i in range(num):
        utt = utterances[rng.integers(0, len(utterances))]
        lo, hi = _valid_center_range(utt, cfg)
        t = int(rng.integers(max(lo, lo - offset), min(hi, hi - offset)))
        lms[i], _ = _window_at(utt, t, cfg)
        _, aus[i] = _window_at(utt, t + offset, cfg)
    with T.no_grad():
        return float(model.sync_prob(lms, aus).data.mean())


def train_sync_expert(utterances: list[Utterance], config: SyncExpertConfig,
                      steps: int = 1500, batch: int = 64, lr: float = 1e-3,
                      seed: int = 0,
                      negative_offset_range: tuple[int, int] = (10, 40)):
    """Returns (model, loss history). Requires >= 2 utterances so that
    cross-utterance negatives exist."""
    if len(utterances) < 2:
        raise ValueError("sync-expert training needs at least 2 utterances")
    rng = np.random.default_rng([seed, 57])
    model = SyncExpert(config, seed=seed)
    opt = nn.Adam(model.parameters(), lr=lr)
    history = []
    for step in range(steps):
        lms, aus, labels = sample_batch(utterances, config, batch, rng,
                                        negative_offset_range)
        prob = model.sync_prob(lms, aus)
        loss = bce_loss(prob, labels)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(loss.item())
    model.set_training(False)
    return model, history
