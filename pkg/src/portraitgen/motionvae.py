"""Variational motion generator: audio-conditioned sequence VAE with a
normalizing-flow prior.

The encoder and decoder are non-causal WaveNets (dilated convolutions with a
cycling 1,2,4,8 schedule) operating on whole sequences of arbitrary length in
a single pass; there is no sliding-window splitting. The prior is a stack of
1D-convolution affine coupling layers with channel flips, conditioned on the
audio, replacing the static Gaussian prior. Training minimizes a single-sample
Monte-Carlo ELBO plus a frozen sync-expert guidance term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint as ckpt
from . import geometry as geo
from . import nn
from . import tensor as T
from .corpus import AUDIO_PER_VIDEO, AudioFeatureSequence, Utterance
from .syncexpert import SyncExpert

LM_DIM = geo.NUM_LANDMARKS * 3
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class MotionVAEConfig:
    encoder_layers: int = 8
    decoder_layers: int = 4
    conv_kernel: int = 5
    channels: int = 192
    latent_size: int = 16
    prior_flow_layers: int = 4
    prior_flow_kernel: int = 3
    prior_flow_channels: int = 64
    feature_dim: int = 64
    sync_loss_weight: float = 0.1
    kl_weight: float = 1.0
    smooth_sigma: float = 1.0

    def __post_init__(self):
        values = [self.encoder_layers, self.decoder_layers, self.conv_kernel,
                  self.channels, self.latent_size, self.prior_flow_layers,
                  self.prior_flow_kernel, self.prior_flow_channels, self.feature_dim]
        if any(v < 1 for v in values):
            raise ValueError("all motion-VAE size parameters must be positive")
        if self.latent_size % 2 != 0:
            raise ValueError(
                f"latent_size must be even for coupling splits, got {self.latent_size}")


class WaveNet(nn.Module):
    """Non-causal WaveNet: gated dilated convolutions with residual and skip
    paths; audio condition added channel-wise at every block."""

    DILATION_CYCLE = (1, 2, 4, 8)

    def __init__(self, channels: int, cond_channels: int, layers: int, kernel: int,
                 rng: np.random.Generator):
        self.dil_convs = []
        self.cond_projs = []
        self.res_convs = []
        self.skip_convs = []
        for i in range(layers):
            d = self.DILATION_CYCLE[i % len(self.DILATION_CYCLE)]
            self.dil_convs.append(nn.Conv1d(channels, 2 * channels, kernel, dilation=d, rng=rng))
            self.cond_projs.append(nn.Conv1d(cond_channels, 2 * channels, 1, rng=rng))
            if i < layers - 1:  # the last block feeds only the skip path
                self.res_convs.append(nn.Conv1d(channels, channels, 1, rng=rng))
            self.skip_convs.append(nn.Conv1d(channels, channels, 1, rng=rng))

    def __call__(self, x, cond):
        skip_total = None
        h = x
        c = x.shape[1]
        for i, (dil, cp, sk) in enumerate(zip(self.dil_convs, self.cond_projs,
                                              self.skip_convs)):
            gates = T.add(dil(h), cp(cond))
            filt = gates[:, :c, :]
            gate = gates[:, c:, :]
            act = T.mul(T.tanh(filt), T.sigmoid(gate))
            if i < len(self.dil_convs) - 1:
                h = T.add(h, self.res_convs[i](act))
            s = sk(act)
            skip_total = s if skip_total is None else T.add(skip_total, s)
        return T.relu(skip_total)


class ConditionNet(nn.Module):
    """Audio features (B, D, 2T) -> condition (B, C, T) via a stride-2
    convolutional downsample."""

    def __init__(self, feature_dim: int, channels: int, kernel: int,
                 rng: np.random.Generator):
        self.conv = nn.Conv1d(feature_dim, channels, kernel, rng=rng)

    def __call__(self, audio):
        h = self.conv(audio)
        return h[:, :, ::AUDIO_PER_VIDEO]


class Encoder(nn.Module):
    def __init__(self, cfg: MotionVAEConfig, rng: np.random.Generator):
        c = cfg.channels
        self.pre = nn.Conv1d(LM_DIM, c, cfg.conv_kernel, rng=rng)
        self.pre_norm = nn.LayerNorm(c)
        self.wavenet = WaveNet(c, c, cfg.encoder_layers, cfg.conv_kernel, rng)
        self.out = nn.Conv1d(c, 2 * cfg.latent_size, 1, rng=rng)

    def __call__(self, lm, cond):
        h = self.pre_norm(T.relu(self.pre(lm)))
        h = self.wavenet(h, cond)
        return self.out(h)  # (B, 2*latent, T): mean then log-variance


class Decoder(nn.Module):
    def __init__(self, cfg: MotionVAEConfig, rng: np.random.Generator):
        c = cfg.channels
        self.pre = nn.Conv1d(cfg.latent_size, c, 1, rng=rng)
        self.wavenet = WaveNet(c, c, cfg.decoder_layers, cfg.conv_kernel, rng)
        self.post = nn.ConvTranspose1d(c, c, cfg.conv_kernel, stride=1, rng=rng)
        self.post_norm = nn.LayerNorm(c)
        self.out = nn.Conv1d(c, LM_DIM, 1, zero_init=True, rng=rng)

    def __call__(self, z, cond):
        h = self.wavenet(self.pre(z), cond)
        h = self.post_norm(T.relu(self.post(h)))
        return self.out(h)  # (B, 204, T), zero at init for a stable start


class CouplingLayer(nn.Module):
    """Affine coupling on channel halves; identity at init (zero-init scale/
    shift head)."""

    def __init__(self, latent: int, hidden: int, kernel: int, cond_channels: int,
                 rng: np.random.Generator):
        half = latent // 2
        self.inp = nn.Conv1d(half, hidden, kernel, rng=rng)
        self.cond = nn.Conv1d(cond_channels, hidden, 1, rng=rng)
        self.mid = nn.Conv1d(hidden, hidden, kernel, rng=rng)
        self.out = nn.Conv1d(hidden, 2 * half, 1, zero_init=True, rng=rng)
        self.half = half

    def _scale_shift(self, za, cond):
        h = T.relu(T.add(self.inp(za), self.cond(cond)))
        h = T.relu(self.mid(h))
        st = self.out(h)
        s = T.mul(T.tanh(st[:, :self.half, :]), 2.0)  # bounded log-scale
        t = st[:, self.half:, :]
        return s, t

    def forward(self, z, cond):
        za, zb = z[:, :self.half, :], z[:, self.half:, :]
        s, t = self._scale_shift(za, cond)
        zb = T.add(T.mul(zb, T.texp(s)), t)
        return T.concat([za, zb], axis=1), T.tsum(s, axis=(1, 2))

    def inverse(self, z, cond):
        za, zb = z[:, :self.half, :], z[:, self.half:, :]
        s, t = self._scale_shift(za, cond)
        zb = T.mul(zb - t, T.texp(T.mul(s, -1.0)))
        return T.concat([za, zb], axis=1), T.mul(T.tsum(s, axis=(1, 2)), -1.0)


def _flip(z):
    return z[:, ::-1, :]


class PriorFlow(nn.Module):
    """Stack of (flip, coupling) steps mapping base noise z0 to the prior
    sample z, conditioned on audio. Volume change comes only from couplings."""

    def __init__(self, cfg: MotionVAEConfig, rng: np.random.Generator):
        self.layers = [CouplingLayer(cfg.latent_size, cfg.prior_flow_channels,
                                     cfg.prior_flow_kernel, cfg.channels, rng)
                       for _ in range(cfg.prior_flow_layers)]

    def forward(self, z0, cond):
        z, total = z0, None
        for layer in self.layers:
            z = _flip(z)
            z, ld = layer.forward(z, cond)
            total = ld if total is None else T.add(total, ld)
        return z, total

    def inverse(self, z, cond):
        total = None
        for layer in reversed(self.layers):
            z, ld = layer.inverse(z, cond)
            z = _flip(z)
            total = ld if total is None else T.add(total, ld)
        return z, total


class MotionVAE(nn.Module):
    def __init__(self, config: MotionVAEConfig, seed: int = 0):
        rng = np.random.default_rng([seed, 43])
        self.config = config
        self.cond_net = ConditionNet(config.feature_dim, config.channels,
                                     config.conv_kernel, rng)
        self.encoder = Encoder(config, rng)
        self.decoder = Decoder(config, rng)
        self.prior = PriorFlow(config, rng)

    # -- core ops ----------------------------------------------------------

    def _check_aligned(self, lm_len: int, audio_len: int) -> None:
        if audio_len != AUDIO_PER_VIDEO * lm_len:
            raise T.ShapeError(
                f"audio length {audio_len} must be {AUDIO_PER_VIDEO}x landmark length {lm_len}")

    def condition(self, audio):
        return self.cond_net(audio)

    def encode(self, lm, audio):
        """lm: (B, 204, T) Tensor/array, audio: (B, D, 2T) -> (mean, log_var),
        each (B, latent, T)."""
        lm = lm if isinstance(lm, T.Tensor) else T.Tensor(np.asarray(lm))
        audio = audio if isinstance(audio, T.Tensor) else T.Tensor(np.asarray(audio))
        self._check_aligned(lm.shape[2], audio.shape[2])
        cond = self.condition(audio)
        stats = self.encoder(lm, cond)
        k = self.config.latent_size
        return stats[:, :k, :], stats[:, k:, :]

    def decode(self, z, audio_or_cond, is_cond: bool = False):
        cond = audio_or_cond if is_cond else self.condition(
            audio_or_cond if isinstance(audio_or_cond, T.Tensor) else T.Tensor(np.asarray(audio_or_cond)))
        z = z if isinstance(z, T.Tensor) else T.Tensor(np.asarray(z))
        return self.decoder(z, cond)

    # -- losses --------------------------------------------------------------

    def elbo_loss(self, lm: np.ndarray, audio: np.ndarray, sync: SyncExpert | None,
                  noise: np.ndarray | None = None, rng: np.random.Generator | None = None,
                  kl_weight: float | None = None, sync_weight: float | None = None,
                  sync_windows: int = 4):
        """Single-sample Monte-Carlo ELBO with optional sync guidance.

        lm: (B, T, 68, 3) normalized landmarks; audio: (B, 2T, D).
        Returns (loss Tensor, component dict of floats).
        """
        kl_weight = self.config.kl_weight if kl_weight is None else kl_weight
        sync_weight = self.config.sync_loss_weight if sync_weight is None else sync_weight
        lm = np.asarray(lm)
        audio = np.asarray(audio)
        b, t = lm.shape[0], lm.shape[1]
        lm_flat = T.Tensor(lm.reshape(b, t, LM_DIM).transpose(0, 2, 1))
        audio_t = T.Tensor(audio.transpose(0, 2, 1))
        cond = self.condition(audio_t)

        stats = self.encoder(lm_flat, cond)
        k = self.config.latent_size
        mu, logvar = stats[:, :k, :], stats[:, k:, :]
        if noise is None:
            rng = rng or np.random.default_rng(0)
            noise = rng.standard_normal((b, k, t))
        eps_t = T.Tensor(np.asarray(noise))
        z = T.add(mu, T.mul(T.texp(T.mul(logvar, 0.5)), eps_t))

        recon_pred = self.decoder(z, cond)
        diff = recon_pred - lm_flat
        recon = T.mul(T.tmean(T.tsum(T.mul(diff, diff), axis=1)), 0.5)

        # KL estimate at the sampled z: log q(z|l,a) - log p(z|a)
        log_q = T.tmean(T.tsum(
            T.mul(T.add(T.add(logvar, T.mul(eps_t, eps_t)), LOG_2PI), -0.5),
            axis=(1, 2))) * (1.0 / t)
        z0, logdet_inv = self.prior.inverse(z, cond)
        log_p = T.add(
            T.tsum(T.mul(T.add(T.mul(z0, z0), LOG_2PI), -0.5), axis=(1, 2)),
            logdet_inv)
        log_p = T.tmean(log_p) * (1.0 / t)
        kl = log_q - log_p

        components = {}
        loss = T.add(recon, T.mul(kl, kl_weight))
        if sync is not None and sync_weight != 0.0:
            sync_term = self._sync_term(recon_pred, audio, sync, sync_windows,
                                        rng or np.random.default_rng(1))
            loss = T.add(loss, T.mul(sync_term, sync_weight))
            components["sync"] = sync_term.item()
        else:
            components["sync"] = 0.0
        components["recon"] = recon.item()
        components["kl"] = kl.item()
        components["total"] = loss.item()
        if not np.isfinite(components["total"]):
            raise FloatingPointError(f"non-finite ELBO components: {components}")
        return loss, components

    def _sync_term(self, recon_pred, audio: np.ndarray, sync: SyncExpert,
                   num_windows: int, rng: np.random.Generator):
        """-E[log D_sync(l_hat, a)] over random windows, differentiable
        through the decoded landmarks."""
        cfg = sync.config
        b, _, t = recon_pred.shape
        if t < cfg.lm_window + 2:
            return T.Tensor(np.zeros(()))
        lws, aws = [], []
        for _ in range(num_windows):
            i = int(rng.integers(0, b))
            c0 = int(rng.integers(cfg.lm_window // 2 + 1, t - cfg.lm_window // 2 - 1))
            s = c0 - cfg.lm_window // 2
            lw = recon_pred[i:i + 1, :, s:s + cfg.lm_window]  # (1, 204, T_l)
            lws.append(T.reshape(T.transpose(lw, (0, 2, 1)),
                                 (1, cfg.lm_window, geo.NUM_LANDMARKS, 3)))
            a0 = AUDIO_PER_VIDEO * c0 - cfg.audio_window // 2
            a0 = max(0, min(a0, audio.shape[1] - cfg.audio_window))
            aws.append(audio[i, a0:a0 + cfg.audio_window])
        lm_win = T.concat(lws, axis=0)
        prob = sync.sync_prob(lm_win, np.stack(aws))
        p = T.add(T.mul(prob, 1.0 - 2e-7), 1e-7)
        return T.tmean(T.mul(T.tlog(p), -1.0))

    # -- inference -------------------------------------------------------------

    def generate(self, audio: AudioFeatureSequence, temperature: float,
                 stats: geo.NormalizationStats | None = None, seed: int = 0,
                 smooth: bool = True) -> geo.LandmarkSequence:
        """Sample base noise, push through the prior flow, decode, de-normalize,
        and smooth. Deterministic given (audio, temperature, seed)."""
        t_a = len(audio)
        if t_a % AUDIO_PER_VIDEO != 0:
            raise T.ShapeError(f"audio length {t_a} not a multiple of {AUDIO_PER_VIDEO}")
        t = t_a // AUDIO_PER_VIDEO
        rng = np.random.default_rng([seed, 97])
        z0 = temperature * rng.standard_normal((1, self.config.latent_size, t))
        with T.no_grad():
            cond = self.condition(T.Tensor(audio.features.T[None]))
            z, _ = self.prior.forward(T.Tensor(z0), cond)
            out = self.decoder(z, cond)
        frames = out.data[0].T.reshape(t, geo.NUM_LANDMARKS, 3)
        seq = geo.LandmarkSequence(frames)
        if stats is not None:
            seq = geo.invert_normalization(seq, stats)
        if smooth:
            seq = geo.gaussian_smooth(seq, self.config.smooth_sigma)
        return seq

    def predict_normalized(self, audio: AudioFeatureSequence, temperature: float = 0.0,
                           seed: int = 0) -> np.ndarray:
        """Normalized-space prediction (T, 68, 3), no de-normalization/smoothing."""
        seq = self.generate(audio, temperature, stats=None, seed=seed, smooth=False)
        return seq.frames

    def save(self, path, optimizer: nn.Adam | None = None) -> None:
        arrays = self.state_arrays()
        if optimizer is not None:
            arrays.update(optimizer.state_arrays())
        ckpt.save_arrays(path, arrays, meta={"config": vars(self.config)})

    @classmethod
    def load(cls, path, with_optimizer: bool = False):
        arrays, meta = ckpt.load_arrays(path)
        model = cls(MotionVAEConfig(**meta["config"]))
        model.load_state_arrays({k: v for k, v in arrays.items()
                                 if not k.startswith("optim/")})
        model.set_training(False)
        if with_optimizer:
            opt = nn.Adam(model.parameters())
            opt.load_state_arrays(arrays)
            return model, opt
        return model


def crop_batch(utterances: list[Utterance], stats: geo.NormalizationStats,
               batch: int, length: int, rng: np.random.Generator):
    """Random aligned crops: (B, T, 68, 3) normalized landmarks, (B, 2T, D) audio."""
    lms = np.empty((batch, length, geo.NUM_LANDMARKS, 3))
    aus = None
    for i in range(batch):
        utt = utterances[rng.integers(0, len(utterances))]
        t0 = int(rng.integers(0, len(utt.landmarks) - length + 1))
        lms[i] = (utt.landmarks.frames[t0:t0 + length] - stats.mean) / stats.std
        a = utt.audio.features[AUDIO_PER_VIDEO * t0: AUDIO_PER_VIDEO * (t0 + length)]
        if aus is None:
            aus = np.empty((batch, AUDIO_PER_VIDEO * length, a.shape[1]))
        aus[i] = a
    return lms, aus


def train_motion_vae(utterances: list[Utterance], stats: geo.NormalizationStats,
                     sync: SyncExpert | None, config: MotionVAEConfig,
                     steps: int = 2000, batch: int = 4, crop: int = 64,
                     lr: float = 1e-3, seed: int = 0, log_every: int = 50,
                     callback=None):
    """Adam training with KL warm-up over the first 10% of steps and the sync
    term ramped in after 50%. Returns (model, optimizer, history)."""
    rng = np.random.default_rng([seed, 71])
    model = MotionVAE(config, seed=seed)
    opt = nn.Adam(model.parameters(), lr=lr)
    history: list[dict] = []
    warmup = max(1, steps // 10)
    for step in range(steps):
        kl_w = config.kl_weight * min(1.0, (step + 1) / warmup)
        sync_w = config.sync_loss_weight if (sync is not None and step >= steps // 2) else 0.0
        lms, aus = crop_batch(utterances, stats, batch, crop, rng)
        loss, comps = model.elbo_loss(lms, aus, sync, rng=rng,
                                      kl_weight=kl_w, sync_weight=sync_w)
        opt.zero_grad()
        loss.backward()
        opt.step()
        comps["step"] = step
        history.append(comps)
        if callback is not None and (step + 1) % log_every == 0:
            callback(step, comps)
    model.set_training(False)
    return model, opt, history


def heldout_recon_mse(model: MotionVAE, utterances: list[Utterance],
                      stats: geo.NormalizationStats, num: int = 8, crop: int = 64,
                      seed: int = 0) -> tuple[float, float]:
    """Posterior-mean reconstruction MSE on held-out crops, and the variance of
    the normalized landmarks over the same crops."""
    rng = np.random.default_rng([seed, 13])
    lms, aus = crop_batch(utterances, stats, num, crop, rng)
    b, t = lms.shape[0], lms.shape[1]
    with T.no_grad():
        lm_flat = lms.reshape(b, t, LM_DIM).transpose(0, 2, 1)
        cond = model.condition(T.Tensor(aus.transpose(0, 2, 1)))
        stats_out = model.encoder(T.Tensor(lm_flat), cond)
        mu = stats_out[:, :model.config.latent_size, :]
        pred = model.decoder(mu, cond).data
    mse = float(((pred - lm_flat) ** 2).mean())
    var = float(lms.var())
    return mse, var
