"""Domain-adaptive post-net and frame-level discriminator.

The post-net is a residual 1D-convolution stack that nudges landmark
sequences from the multi-speaker prediction domain into the target-person
domain; at initialization it is exactly the identity. The discriminator is a
per-frame MLP trained with the least-squares GAN objective; the post-net is
additionally guided by the frozen sync-expert and a weak supervised term
pairing target-audio predictions with target ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint as ckpt
from . import geometry as geo
from . import nn
from . import tensor as T
from .corpus import AUDIO_PER_VIDEO, Utterance
from .motionvae import LM_DIM, MotionVAE
from .syncexpert import SyncExpert


@dataclass
class PostNetConfig:
    postnet_layers: int = 8
    kernel: int = 3
    channels: int = 256
    discriminator_layers: int = 5
    hidden: int = 256
    dropout: float = 0.25
    adv_weight: float = 1.0
    sync_weight: float = 0.1
    sup_weight: float = 1.0

    def __post_init__(self):
        if min(self.postnet_layers, self.kernel, self.channels,
               self.discriminator_layers, self.hidden) < 1:
            raise ValueError("post-net sizes must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")


class PostNet(nn.Module):
    def __init__(self, config: PostNetConfig, seed: int = 0):
        rng = np.random.default_rng([seed, 11])
        self.config = config
        c = config.channels
        self.pre = nn.Conv1d(LM_DIM, c, config.kernel, rng=rng)
        self.convs = [nn.Conv1d(c, c, config.kernel, rng=rng)
                      for _ in range(config.postnet_layers)]
        self.norms = [nn.BatchNorm1d(c) for _ in range(config.postnet_layers)]
        self.out = nn.Conv1d(c, LM_DIM, config.kernel, zero_init=True, rng=rng)

    def __call__(self, lm):
        """lm: (B, 204, T) -> refined (B, 204, T); residual, so identity at init."""
        h = T.relu(self.pre(lm))
        for conv, norm in zip(self.convs, self.norms):
            h = T.add(h, norm(T.relu(conv(h))))
        return T.add(lm, self.out(h))

    def refine(self, seq_frames: np.ndarray) -> np.ndarray:
        """(T, 68, 3) normalized landmarks -> refined (T, 68, 3)."""
        t = seq_frames.shape[0]
        x = T.Tensor(seq_frames.reshape(t, LM_DIM).T[None])
        with T.no_grad():
            y = self(x)
        return y.data[0].T.reshape(t, geo.NUM_LANDMARKS, 3)

    def save(self, path) -> None:
        ckpt.save_arrays(path, self.state_arrays(), meta={"config": vars(self.config)})

    @classmethod
    def load(cls, path) -> "PostNet":
        arrays, meta = ckpt.load_arrays(path)
        model = cls(PostNetConfig(**meta["config"]))
        model.load_state_arrays(arrays)
        model.set_training(False)
        return model


class FrameDiscriminator(nn.Module):
    """MLP scoring a single flattened landmark frame; raw (unbounded) output
    for the least-squares objective."""

    def __init__(self, config: PostNetConfig, seed: int = 0):
        rng = np.random.default_rng([seed, 13])
        self.config = config
        dims = [LM_DIM] + [config.hidden] * (config.discriminator_layers - 1) + [1]
        self.layers = [nn.Affine(dims[i], dims[i + 1], rng=rng)
                       for i in range(len(dims) - 1)]
        self.drop = nn.Dropout(config.dropout)

    def __call__(self, frames, rng: np.random.Generator | None = None):
        """frames: (N, 204) -> scores (N,). Dropout active only in training mode."""
        h = frames if isinstance(frames, T.Tensor) else T.Tensor(np.asarray(frames))
        rng = rng or np.random.default_rng(0)
        for layer in self.layers[:-1]:
            h = self.drop(T.relu(layer(h)), rng)
        return T.reshape(self.layers[-1](h), (-1,))

    def save(self, path) -> None:
        ckpt.save_arrays(path, self.state_arrays(), meta={"config": vars(self.config)})

    @classmethod
    def load(cls, path) -> "FrameDiscriminator":
        arrays, meta = ckpt.load_arrays(path)
        model = cls(PostNetConfig(**meta["config"]))
        model.load_state_arrays(arrays)
        model.set_training(False)
        return model


def discriminator_loss(disc: FrameDiscriminator, refined_frames, target_frames,
                       rng: np.random.Generator | None = None) -> T.Tensor:
    """LSGAN: E[(D(refined) - 0)^2] + E[(D(real) - 1)^2]."""
    if len(refined_frames) == 0 or len(target_frames) == 0:
        raise ValueError("discriminator_loss needs nonempty batches")
    s_fake = disc(refined_frames, rng)
    s_real = disc(target_frames, rng)
    return T.add(T.tmean(T.mul(s_fake, s_fake)),
                 T.tmean(T.power(s_real - 1.0, 2.0)))


def postnet_loss(postnet: PostNet, disc: FrameDiscriminator, sync: SyncExpert | None,
                 corpus_pred: np.ndarray, corpus_audio: np.ndarray,
                 target_pred: np.ndarray, target_gt: np.ndarray,
                 config: PostNetConfig, rng: np.random.Generator,
                 sync_windows: int = 4):
    """Adversarial + sync + weak-supervised post-net objective.

    corpus_pred: (B, T, 68, 3) normalized predictions from corpus audio;
    corpus_audio: (B, 2T, D); target_pred/target_gt: (B', T', 68, 3)
    predictions from target audio and target ground truth.
    Returns (loss Tensor, component dict).
    """
    b, t = corpus_pred.shape[0], corpus_pred.shape[1]
    x = T.Tensor(corpus_pred.reshape(b, t, LM_DIM).transpose(0, 2, 1))
    refined = postnet(x)

    frames = T.reshape(T.transpose(refined, (0, 2, 1)), (b * t, LM_DIM))
    scores = disc(frames, rng)
    adv = T.tmean(T.power(scores - 1.0, 2.0))

    if sync is not None and config.sync_weight != 0.0:
        sync_term = _sync_term(refined, corpus_audio, sync, sync_windows, rng)
    else:
        sync_term = T.Tensor(np.zeros(()))

    bp, tp = target_pred.shape[0], target_pred.shape[1]
    xp = T.Tensor(target_pred.reshape(bp, tp, LM_DIM).transpose(0, 2, 1))
    refined_p = postnet(xp)
    gt = target_gt.reshape(bp, tp, LM_DIM).transpose(0, 2, 1)
    sup = T.mse(refined_p, T.Tensor(gt))

    loss = T.add(T.add(T.mul(adv, config.adv_weight),
                       T.mul(sync_term, config.sync_weight)),
                 T.mul(sup, config.sup_weight))
    comps = {"adversarial": adv.item(), "sync": sync_term.item(),
             "supervised": sup.item(), "total": loss.item()}
    if not np.isfinite(comps["total"]):
        raise FloatingPointError(f"non-finite post-net components: {comps}")
    return loss, comps


def _sync_term(refined, audio: np.ndarray, sync: SyncExpert, num_windows: int,
               rng: np.random.Generator):
    cfg = sync.config
    b, _, t = refined.shape
    if t < cfg.lm_window + 2:
        return T.Tensor(np.zeros(()))
    lws, aws = [], []
    for _ in range(num_windows):
        i = int(rng.integers(0, b))
        c0 = int(rng.integers(cfg.lm_window // 2 + 1, t - cfg.lm_window // 2 - 1))
        s = c0 - cfg.lm_window // 2
        lw = refined[i:i + 1, :, s:s + cfg.lm_window]
        lws.append(T.reshape(T.transpose(lw, (0, 2, 1)),
                             (1, cfg.lm_window, geo.NUM_LANDMARKS, 3)))
        a0 = AUDIO_PER_VIDEO * c0 - cfg.audio_window // 2
        a0 = max(0, min(a0, audio.shape[1] - cfg.audio_window))
        aws.append(audio[i, a0:a0 + cfg.audio_window])
    prob = sync.sync_prob(T.concat(lws, axis=0), np.stack(aws))
    p = T.add(T.mul(prob, 1.0 - 2e-7), 1e-7)
    return T.tmean(T.mul(T.tlog(p), -1.0))


@dataclass
class AdaptationData:
    """Frozen-VAE predictions and targets, all in normalized landmark space."""
    corpus_pred: list[np.ndarray]   # per utterance (T, 68, 3)
    corpus_audio: list[np.ndarray]  # per utterance (2T, D)
    target_pred: list[np.ndarray]   # VAE predictions from target audio
    target_gt: list[np.ndarray]     # target ground-truth landmarks


def prepare_adaptation_data(vae: MotionVAE, corpus_utts: list[Utterance],
                            target_utts: list[Utterance],
                            stats: geo.NormalizationStats,
                            temperature: float = 0.0, seed: int = 0) -> AdaptationData:
    corpus_pred, corpus_audio = [], []
    for k, u in enumerate(corpus_utts):
        corpus_pred.append(vae.predict_normalized(u.audio, temperature, seed=seed + k))
        corpus_audio.append(u.audio.features)
    target_pred, target_gt = [], []
    for k, u in enumerate(target_utts):
        target_pred.append(vae.predict_normalized(u.audio, 0.0, seed=seed))
        target_gt.append((u.landmarks.frames - stats.mean) / stats.std)
    return AdaptationData(corpus_pred, corpus_audio, target_pred, target_gt)


def _crop(arrs: list[np.ndarray], aux: list[np.ndarray] | None, batch: int,
          length: int, rng: np.random.Generator, audio: bool = False):
    xs, ys = [], []
    for _ in range(batch):
        i = int(rng.integers(0, len(arrs)))
        t0 = int(rng.integers(0, arrs[i].shape[0] - length + 1))
        xs.append(arrs[i][t0:t0 + length])
        if aux is not None:
            if audio:
                ys.append(aux[i][AUDIO_PER_VIDEO * t0: AUDIO_PER_VIDEO * (t0 + length)])
            else:
                ys.append(aux[i][t0:t0 + length])
    return np.stack(xs), (np.stack(ys) if aux is not None else None)


def train_adaptation(data: AdaptationData, sync: SyncExpert | None,
                     config: PostNetConfig, steps: int = 800, batch: int = 4,
                     crop: int = 48, lr: float = 5e-4, seed: int = 0,
                     divergence_limit: float = 1e3, callback=None):
    """Alternating 1:1 discriminator / post-net updates on frozen-VAE data.

    Returns (postnet, discriminator, history)."""
    rng = np.random.default_rng([seed, 23])
    postnet = PostNet(config, seed=seed)
    disc = FrameDiscriminator(config, seed=seed)
    opt_pn = nn.Adam(postnet.parameters(), lr=lr)
    opt_d = nn.Adam(disc.parameters(), lr=lr)
    history: list[dict] = []
    for step in range(steps):
        pred_b, audio_b = _crop(data.corpus_pred, data.corpus_audio, batch, crop,
                                rng, audio=True)
        tgt_pred_b, tgt_gt_b = _crop(data.target_pred, data.target_gt, batch, crop, rng)

        # discriminator step: refined samples are detached from the post-net
        b, t = pred_b.shape[0], pred_b.shape[1]
        with T.no_grad():
            refined = postnet(T.Tensor(pred_b.reshape(b, t, LM_DIM).transpose(0, 2, 1)))
        fake = refined.data.transpose(0, 2, 1).reshape(b * t, LM_DIM)
        real = tgt_gt_b.reshape(-1, LM_DIM)
        d_loss = discriminator_loss(disc, fake, real, rng)
        opt_d.zero_grad()
        d_loss.backward()
        opt_d.step()

        pn_loss, comps = postnet_loss(postnet, disc, sync, pred_b, audio_b,
                                      tgt_pred_b, tgt_gt_b, config, rng)
        opt_pn.zero_grad()
        pn_loss.backward()
        opt_pn.step()
        comps["discriminator"] = d_loss.item()
        comps["step"] = step
        history.append(comps)
        if comps["total"] > divergence_limit or comps["discriminator"] > divergence_limit:
            raise FloatingPointError(
                f"adaptation diverged at step {step}: {comps}")
        if callback is not None and (step + 1) % 50 == 0:
            callback(step, comps)
    postnet.set_training(False)
    disc.set_training(False)
    return postnet, disc, history


def discriminator_accuracy(disc: FrameDiscriminator, postnet: PostNet,
                           pred_seqs: list[np.ndarray], gt_seqs: list[np.ndarray],
                           num: int = 400, seed: int = 0) -> float:
    """Held-out accuracy of real-vs-refined classification at threshold 0.5."""
    rng = np.random.default_rng([seed, 29])
    disc.set_training(False)
    postnet.set_training(False)
    refined_seqs = [postnet.refine(p) for p in pred_seqs]
    fakes, reals = [], []
    for _ in range(num // 2):
        i = int(rng.integers(0, len(refined_seqs)))
        t = int(rng.integers(0, refined_seqs[i].shape[0]))
        fakes.append(refined_seqs[i][t])
        j = int(rng.integers(0, len(gt_seqs)))
        t = int(rng.integers(0, gt_seqs[j].shape[0]))
        reals.append(gt_seqs[j][t])
    with T.no_grad():
        s_fake = disc(np.stack(fakes).reshape(-1, LM_DIM)).data
        s_real = disc(np.stack(reals).reshape(-1, LM_DIM)).data
    correct = (s_fake < 0.5).sum() + (s_real >= 0.5).sum()
    return float(correct) / (len(s_fake) + len(s_real))
