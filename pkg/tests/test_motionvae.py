"""Variational motion generator: sequence contracts, flow invertibility,
ELBO components, sampling behavior."""

import numpy as np
import pytest

from portraitgen import corpus as cp
from portraitgen import motionvae as mv
from portraitgen import tensor as T
from helpers import param_grad_check

SMALL = mv.MotionVAEConfig(encoder_layers=2, decoder_layers=2, conv_kernel=3,
                           channels=16, latent_size=4, prior_flow_layers=2,
                           prior_flow_kernel=3, prior_flow_channels=8,
                           feature_dim=8)


@pytest.fixture(scope="module")
def model():
    m = mv.MotionVAE(SMALL, seed=0)
    m.set_training(False)
    return m


def _randomize_flow(m, scale=0.5, seed=0):
    """Push the couplings away from identity (as training would)."""
    rng = np.random.default_rng(seed)
    for layer in m.prior.layers:
        layer.out.w.data = scale * rng.standard_normal(layer.out.w.shape)
        layer.out.b.data = scale * rng.standard_normal(layer.out.b.shape)


def _io(t, seed=0):
    rng = np.random.default_rng(seed)
    lm = rng.standard_normal((1, t, 68, 3))
    au = rng.standard_normal((1, 2 * t, SMALL.feature_dim))
    return lm, au


@pytest.mark.parametrize("t", [7, 64, 311])
def test_encode_preserves_length(model, t):
    lm, au = _io(t)
    mu, logvar = model.encode(lm.reshape(1, t, -1).transpose(0, 2, 1),
                              au.transpose(0, 2, 1))
    assert mu.shape == (1, SMALL.latent_size, t)
    assert logvar.shape == (1, SMALL.latent_size, t)
    assert np.isfinite(logvar.data).all()


def test_encode_rejects_misaligned(model):
    lm = np.zeros((1, mv.LM_DIM, 10))
    au = np.zeros((1, SMALL.feature_dim, 19))
    with pytest.raises(T.ShapeError):
        model.encode(lm, au)


def test_doubling_length_doubles_output(model):
    for t in (16, 32):
        lm, au = _io(t)
        mu, _ = model.encode(lm.reshape(1, t, -1).transpose(0, 2, 1),
                             au.transpose(0, 2, 1))
        assert mu.shape[2] == t  # single pass, no window splitting


def test_decode_shape_and_determinism(model):
    rng = np.random.default_rng(1)
    z = rng.standard_normal((1, SMALL.latent_size, 12))
    au = rng.standard_normal((1, SMALL.feature_dim, 24))
    with T.no_grad():
        a = model.decode(z, au).data
        b = model.decode(z, au).data
    assert a.shape == (1, mv.LM_DIM, 12)
    assert np.array_equal(a, b)


def test_decoder_zero_init_output():
    fresh = mv.MotionVAE(SMALL, seed=7)
    rng = np.random.default_rng(2)
    z = rng.standard_normal((1, SMALL.latent_size, 9))
    au = rng.standard_normal((1, SMALL.feature_dim, 18))
    with T.no_grad():
        out = fresh.decode(z, au).data
    assert np.abs(out).max() == 0.0  # zero-initialized final projection


def test_flow_identity_at_init(model):
    rng = np.random.default_rng(3)
    z0 = T.Tensor(rng.standard_normal((2, SMALL.latent_size, 11)))
    cond = T.Tensor(rng.standard_normal((2, SMALL.channels, 11)))
    with T.no_grad():
        z, logdet = model.prior.forward(z0, cond)
    # couplings zero-initialized: pure channel flips, no volume change
    assert np.abs(logdet.data).max() == 0.0
    with T.no_grad():
        back, _ = model.prior.inverse(z, cond)
    assert np.abs(back.data - z0.data).max() < 1e-12


def test_flow_roundtrip_after_perturbation():
    m = mv.MotionVAE(SMALL, seed=1)
    _randomize_flow(m, scale=0.8, seed=5)
    rng = np.random.default_rng(4)
    z0 = T.Tensor(rng.standard_normal((2, SMALL.latent_size, 13)))
    cond = T.Tensor(rng.standard_normal((2, SMALL.channels, 13)))
    with T.no_grad():
        z, ld_f = m.prior.forward(z0, cond)
        back, ld_i = m.prior.inverse(z, cond)
    assert np.abs(back.data - z0.data).max() < 1e-6
    assert np.abs(ld_f.data + ld_i.data).max() < 1e-9


def test_logdet_matches_dense_jacobian():
    # T=1, latent=4 toy: finite-difference the full Jacobian
    m = mv.MotionVAE(SMALL, seed=2)
    _randomize_flow(m, scale=0.6, seed=9)
    rng = np.random.default_rng(6)
    z0 = rng.standard_normal((1, 4, 1))
    cond = T.Tensor(rng.standard_normal((1, SMALL.channels, 1)))

    def fwd(v):
        with T.no_grad():
            z, ld = m.prior.forward(T.Tensor(v.reshape(1, 4, 1)), cond)
        return z.data.reshape(4), ld.data.reshape(())

    eps = 1e-6
    jac = np.zeros((4, 4))
    base = z0.reshape(4).copy()
    for j in range(4):
        hi, lo = base.copy(), base.copy()
        hi[j] += eps
        lo[j] -= eps
        jac[:, j] = (fwd(hi)[0] - fwd(lo)[0]) / (2 * eps)
    _, logdet = fwd(base)
    _, numeric = np.linalg.slogdet(jac)
    assert abs(float(logdet) - numeric) < 1e-4


def test_elbo_components_match_formula_oracle(model):
    # identity flow at init makes the prior a closed-form standard normal
    t = 10
    lm, au = _io(t, seed=8)
    noise = np.random.default_rng(9).standard_normal((1, SMALL.latent_size, t))
    loss, comps = model.elbo_loss(lm, au, None, noise=noise)
    lm_flat = lm.reshape(1, t, mv.LM_DIM).transpose(0, 2, 1)
    with T.no_grad():
        cond = model.condition(T.Tensor(au.transpose(0, 2, 1)))
        mu, logvar = model.encode(T.Tensor(lm_flat), T.Tensor(au.transpose(0, 2, 1)))
        mu, logvar = mu.data, logvar.data
        z = mu + np.exp(0.5 * logvar) * noise
        pred = model.decode(z, cond, is_cond=True).data
    recon = 0.5 * ((pred - lm_flat) ** 2).sum(axis=1).mean()
    log2pi = np.log(2 * np.pi)
    log_q = (-0.5 * (logvar + noise ** 2 + log2pi)).sum() / t
    log_p = (-0.5 * (z ** 2 + log2pi)).sum() / t
    kl = log_q - log_p
    assert abs(comps["recon"] - recon) < 1e-8
    assert abs(comps["kl"] - kl) < 1e-8
    assert abs(comps["total"] - (recon + kl)) < 1e-8


def test_kl_zero_when_posterior_equals_prior():
    m = mv.MotionVAE(SMALL, seed=3)
    # posterior forced to N(0, I): zero the encoder head; flow is identity
    m.encoder.out.w.data[:] = 0.0
    m.encoder.out.b.data[:] = 0.0
    t = 12
    lm, au = _io(t, seed=10)
    noise = np.random.default_rng(11).standard_normal((1, SMALL.latent_size, t))
    _, comps = m.elbo_loss(lm, au, None, noise=noise)
    assert abs(comps["kl"]) < 1e-10


def test_sync_component_zero_at_perfect_sync(model):
    class PerfectSync:
        config = __import__("portraitgen.syncexpert", fromlist=["x"]).SyncExpertConfig(
            layers=2, channels=4, embed_dim=4, feature_dim=SMALL.feature_dim)

        def sync_prob(self, lm, au):
            return T.Tensor(np.ones(lm.shape[0]))

    t = 16
    lm, au = _io(t, seed=12)
    _, comps = model.elbo_loss(lm, au, PerfectSync(), sync_weight=0.1,
                               rng=np.random.default_rng(0))
    assert abs(comps["sync"]) < 1e-6


def test_generate_contracts():
    # the zero-initialized decoder head is constant, so perturb it the way
    # training would before probing generative diversity
    m = mv.MotionVAE(SMALL, seed=5)
    rng = np.random.default_rng(18)
    m.decoder.out.w.data = 0.1 * rng.standard_normal(m.decoder.out.w.shape)
    m.set_training(False)
    au = cp.AudioFeatureSequence(rng.standard_normal((40, SMALL.feature_dim)))
    a = m.generate(au, 0.0, seed=1)
    b = m.generate(au, 0.0, seed=2)
    assert np.array_equal(a.frames, b.frames)  # temperature 0 ignores the seed
    assert len(a) == 20 and a.frame_rate == 25.0
    c = m.generate(au, 1.0, seed=1)
    d = m.generate(au, 1.0, seed=2)
    gap = np.linalg.norm(c.frames - d.frames, axis=-1).mean()
    assert gap > 0.0


def test_generate_rejects_odd_audio(model):
    au = cp.AudioFeatureSequence(np.zeros((21, SMALL.feature_dim)))
    with pytest.raises(T.ShapeError):
        model.generate(au, 0.0)


def test_save_load_roundtrip(tmp_path, model):
    path = tmp_path / "vae.ckpt"
    model.save(path)
    back = mv.MotionVAE.load(path)
    au = cp.AudioFeatureSequence(
        np.random.default_rng(14).standard_normal((30, SMALL.feature_dim)))
    assert np.array_equal(model.predict_normalized(au),
                          back.predict_normalized(au))


def test_elbo_gradient_matches_finite_differences():
    m = mv.MotionVAE(SMALL, seed=4)
    _randomize_flow(m, scale=0.3, seed=15)
    t = 8
    lm, au = _io(t, seed=16)
    noise = np.random.default_rng(17).standard_normal((1, SMALL.latent_size, t))

    def loss_fn():
        loss, _ = m.elbo_loss(lm, au, None, noise=noise)
        return loss

    err = param_grad_check(m, "encoder.out.w", loss_fn, tol=1e-3)
    assert err < 1e-3
