"""Domain-adaptation post-net and discriminator: identity at init, LSGAN
formulas against straight-line oracles, gradient checks."""

import numpy as np
import pytest

from portraitgen import postnet as pn
from portraitgen import tensor as T
from helpers import param_grad_check

SMALL = pn.PostNetConfig(postnet_layers=2, kernel=3, channels=12,
                         discriminator_layers=3, hidden=16, dropout=0.25)


def test_residual_identity_at_init():
    net = pn.PostNet(SMALL, seed=0)
    net.set_training(False)
    rng = np.random.default_rng(0)
    for t in (7, 200):
        x = rng.standard_normal((t, 68, 3))
        out = net.refine(x)
        assert out.shape == (t, 68, 3)
        assert np.abs(out - x).max() < 1e-12


def test_refined_length_preserved_after_perturbation():
    net = pn.PostNet(SMALL, seed=1)
    rng = np.random.default_rng(1)
    net.out.w.data = 0.05 * rng.standard_normal(net.out.w.shape)
    net.set_training(False)
    x = rng.standard_normal((33, 68, 3))
    out = net.refine(x)
    assert out.shape == x.shape
    assert np.abs(out - x).max() > 0.0


def test_discriminator_eval_deterministic_and_finite():
    disc = pn.FrameDiscriminator(SMALL, seed=0)
    disc.set_training(False)
    x = np.full((4, pn.LM_DIM), 100.0)
    with T.no_grad():
        a = disc(x).data
        b = disc(x).data
    assert np.array_equal(a, b)
    assert np.isfinite(a).all()
    assert np.isfinite(disc(np.full((2, pn.LM_DIM), -100.0)).data).all()


def test_dropout_active_only_in_training():
    disc = pn.FrameDiscriminator(SMALL, seed=0)
    x = np.random.default_rng(2).standard_normal((6, pn.LM_DIM))
    a = disc(x, np.random.default_rng(3)).data
    b = disc(x, np.random.default_rng(4)).data
    assert not np.array_equal(a, b)  # different dropout masks
    disc.set_training(False)
    with T.no_grad():
        c = disc(x, np.random.default_rng(3)).data
        d = disc(x, np.random.default_rng(4)).data
    assert np.array_equal(c, d)


def test_discriminator_loss_constant_half():
    class Half:
        def __call__(self, frames, rng=None):
            n = np.asarray(frames).shape[0] if not isinstance(frames, T.Tensor) \
                else frames.shape[0]
            return T.Tensor(np.full(n, 0.5))

    loss = pn.discriminator_loss(Half(), np.zeros((3, pn.LM_DIM)),
                                 np.zeros((3, pn.LM_DIM)))
    assert abs(loss.item() - 0.5) < 1e-12


def test_discriminator_loss_perfect_zero():
    class Perfect:
        def __call__(self, frames, rng=None):
            arr = frames.data if isinstance(frames, T.Tensor) else np.asarray(frames)
            return T.Tensor((arr[:, 0] > 0.5).astype(np.float64))

    fake = np.zeros((4, pn.LM_DIM))
    real = np.ones((4, pn.LM_DIM))
    assert pn.discriminator_loss(Perfect(), fake, real).item() == 0.0


def test_discriminator_loss_matches_formula_oracle():
    disc = pn.FrameDiscriminator(SMALL, seed=2)
    disc.set_training(False)
    rng = np.random.default_rng(5)
    fake = rng.standard_normal((5, pn.LM_DIM))
    real = rng.standard_normal((7, pn.LM_DIM))
    with T.no_grad():
        s_fake = disc(fake).data
        s_real = disc(real).data
    expected = (s_fake ** 2).mean() + ((s_real - 1.0) ** 2).mean()
    got = pn.discriminator_loss(disc, fake, real).item()
    assert abs(got - expected) < 1e-10


def test_discriminator_loss_rejects_empty():
    disc = pn.FrameDiscriminator(SMALL, seed=0)
    with pytest.raises(ValueError):
        pn.discriminator_loss(disc, np.zeros((0, pn.LM_DIM)),
                              np.zeros((2, pn.LM_DIM)))


def test_postnet_loss_supervised_zero_when_exact():
    net = pn.PostNet(SMALL, seed=3)  # identity at init
    disc = pn.FrameDiscriminator(SMALL, seed=3)
    net.set_training(False)
    disc.set_training(False)
    rng = np.random.default_rng(6)
    pred = rng.standard_normal((2, 12, 68, 3))
    audio = rng.standard_normal((2, 24, 8))
    tgt_pred = rng.standard_normal((1, 12, 68, 3))
    _, comps = pn.postnet_loss(net, disc, None, pred, audio, tgt_pred,
                               tgt_pred.copy(), SMALL, np.random.default_rng(0))
    assert comps["supervised"] == 0.0  # PN is identity and gt equals input


def test_postnet_loss_adversarial_zero_when_fooled():
    class AlwaysOne:
        def __call__(self, frames, rng=None):
            n = frames.shape[0]
            return T.Tensor(np.ones(n))

    net = pn.PostNet(SMALL, seed=4)
    net.set_training(False)
    rng = np.random.default_rng(7)
    pred = rng.standard_normal((1, 10, 68, 3))
    audio = rng.standard_normal((1, 20, 8))
    tgt = rng.standard_normal((1, 10, 68, 3))
    _, comps = pn.postnet_loss(net, AlwaysOne(), None, pred, audio, tgt,
                               tgt.copy(), SMALL, np.random.default_rng(0))
    assert comps["adversarial"] == 0.0


def test_postnet_loss_matches_formula_oracle():
    net = pn.PostNet(SMALL, seed=5)
    rng0 = np.random.default_rng(8)
    net.out.w.data = 0.05 * rng0.standard_normal(net.out.w.shape)
    disc = pn.FrameDiscriminator(SMALL, seed=5)
    net.set_training(False)
    disc.set_training(False)
    pred = rng0.standard_normal((2, 14, 68, 3))
    audio = rng0.standard_normal((2, 28, 8))
    tgt_pred = rng0.standard_normal((1, 14, 68, 3))
    tgt_gt = rng0.standard_normal((1, 14, 68, 3))
    _, comps = pn.postnet_loss(net, disc, None, pred, audio, tgt_pred, tgt_gt,
                               SMALL, np.random.default_rng(0))
    refined = np.stack([net.refine(p) for p in pred])
    with T.no_grad():
        scores = disc(refined.reshape(-1, pn.LM_DIM)).data
    adv = ((scores - 1.0) ** 2).mean()
    refined_t = np.stack([net.refine(p) for p in tgt_pred])
    sup = ((refined_t - tgt_gt) ** 2).mean()
    total = SMALL.adv_weight * adv + SMALL.sup_weight * sup
    assert abs(comps["adversarial"] - adv) < 1e-10
    assert abs(comps["supervised"] - sup) < 1e-10
    assert abs(comps["total"] - total) < 1e-10


def test_postnet_gradient_matches_finite_differences():
    net = pn.PostNet(SMALL, seed=6)
    disc = pn.FrameDiscriminator(SMALL, seed=6)
    rng0 = np.random.default_rng(9)
    net.out.w.data = 0.05 * rng0.standard_normal(net.out.w.shape)
    net.set_training(False)  # freeze batch-norm stats for repeatable losses
    disc.set_training(False)
    pred = rng0.standard_normal((1, 8, 68, 3))
    audio = rng0.standard_normal((1, 16, 8))
    tgt_pred = rng0.standard_normal((1, 8, 68, 3))
    tgt_gt = rng0.standard_normal((1, 8, 68, 3))

    def loss_fn():
        loss, _ = pn.postnet_loss(net, disc, None, pred, audio, tgt_pred,
                                  tgt_gt, SMALL, np.random.default_rng(0))
        return loss

    err = param_grad_check(net, "out.w", loss_fn, tol=1e-3)
    assert err < 1e-3


def test_discriminator_gradient_matches_finite_differences():
    disc = pn.FrameDiscriminator(SMALL, seed=7)
    disc.set_training(False)
    rng = np.random.default_rng(10)
    fake = rng.standard_normal((4, pn.LM_DIM))
    real = rng.standard_normal((4, pn.LM_DIM))

    def loss_fn():
        return pn.discriminator_loss(disc, fake, real)

    err = param_grad_check(disc, "layers.0.w", loss_fn, tol=1e-3)
    assert err < 1e-3


def test_checkpoint_roundtrips(tmp_path):
    net = pn.PostNet(SMALL, seed=8)
    rng = np.random.default_rng(11)
    net.out.w.data = 0.05 * rng.standard_normal(net.out.w.shape)
    net.set_training(False)
    net.save(tmp_path / "pn.ckpt")
    back = pn.PostNet.load(tmp_path / "pn.ckpt")
    x = rng.standard_normal((9, 68, 3))
    assert np.array_equal(net.refine(x), back.refine(x))

    disc = pn.FrameDiscriminator(SMALL, seed=8)
    disc.set_training(False)
    disc.save(tmp_path / "d.ckpt")
    back_d = pn.FrameDiscriminator.load(tmp_path / "d.ckpt")
    frames = rng.standard_normal((5, pn.LM_DIM))
    with T.no_grad():
        assert np.array_equal(disc(frames).data, back_d(frames).data)
