"""Module/optimizer layer: parameter registration, Adam behavior, batch-norm
statistics, checkpoint round-trips."""

import numpy as np
import pytest

from portraitgen import checkpoint as ckpt
from portraitgen import nn
from portraitgen import tensor as T


class TinyModel(nn.Module):
    def __init__(self):
        rng = np.random.default_rng(0)
        self.fc1 = nn.Affine(3, 4, rng=rng)
        self.fc2 = nn.Affine(4, 1, rng=rng)
        self.norm = nn.BatchNorm1d(4)

    def __call__(self, x):
        h = T.relu(self.fc1(x))
        return self.fc2(h)


def test_parameter_names_unique_and_complete():
    m = TinyModel()
    names = list(m.parameters())
    assert len(names) == len(set(names))
    assert any("fc1" in n for n in names) and any("fc2" in n for n in names)


def test_adam_descends_on_square():
    w = T.Tensor(np.array([1.0]), requires_grad=True)
    opt = nn.Adam({"w": w}, lr=0.1)
    loss = T.tsum(T.mul(w, w))
    loss.backward()
    opt.step()
    assert w.data[0] < 1.0


def test_adam_zero_gradient_keeps_parameter():
    w = T.Tensor(np.array([2.0]), requires_grad=True)
    w.grad = np.zeros(1)
    opt = nn.Adam({"w": w}, lr=0.1)
    opt.step()
    assert w.data[0] == 2.0


def test_adam_missing_gradient_names_parameter():
    w = T.Tensor(np.array([2.0]), requires_grad=True)
    opt = nn.Adam({"weights/deep": w}, lr=0.1)
    with pytest.raises(nn.MissingGradientError, match="weights/deep"):
        opt.step()


def test_adam_solves_least_squares():
    # closed-form optimum: w = 2, b = -1 for y = 2x - 1
    rng = np.random.default_rng(4)
    xs = rng.standard_normal(64)
    ys = 2.0 * xs - 1.0
    w = T.Tensor(np.zeros(1), requires_grad=True)
    b = T.Tensor(np.zeros(1), requires_grad=True)
    opt = nn.Adam({"w": w, "b": b}, lr=0.1)
    xt, yt = T.Tensor(xs), T.Tensor(ys)
    for _ in range(200):
        pred = T.add(T.mul(xt, w), b)
        loss = T.mse(pred, yt)
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert loss.item() < 1e-6
    assert abs(w.data[0] - 2.0) < 1e-2 and abs(b.data[0] + 1.0) < 1e-2


def test_batchnorm_running_stats_update_and_freeze():
    bn = nn.BatchNorm1d(3)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((8, 3, 10)) * 2.0 + 5.0
    for _ in range(700):  # momentum 0.99: residual bias 0.99^700 ~ 1e-3
        bn(T.Tensor(x))
    bn.set_training(False)
    out = bn(T.Tensor(x)).data
    # with converged running stats the normalized output is ~N(0,1)
    assert abs(out.mean()) < 0.05
    assert abs(out.std() - 1.0) < 0.05


def test_batchnorm_training_output_normalized():
    bn = nn.BatchNorm1d(4)
    x = np.random.default_rng(2).standard_normal((16, 4, 7)) * 3.0 + 1.0
    out = bn(T.Tensor(x)).data
    assert np.abs(out.mean(axis=(0, 2))).max() < 1e-8
    assert np.abs(out.std(axis=(0, 2)) - 1.0).max() < 1e-3


def test_checkpoint_roundtrip_bit_identical(tmp_path):
    m = TinyModel()
    arrays = m.state_arrays()
    path = tmp_path / "model.ckpt"
    ckpt.save_arrays(path, arrays, meta={"note": "test"})
    loaded, meta = ckpt.load_arrays(path)
    assert meta["note"] == "test"
    assert set(loaded) == set(arrays)
    for name, arr in arrays.items():
        assert np.array_equal(loaded[name], arr)
        assert loaded[name].dtype == arr.dtype


def test_checkpoint_rejects_corrupt_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 64)
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load_arrays(path)


def test_optimizer_state_persists(tmp_path):
    w = T.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    opt = nn.Adam({"w": w}, lr=0.05)
    for _ in range(3):
        loss = T.tsum(T.mul(w, w))
        opt.zero_grad()
        loss.backward()
        opt.step()
    state = opt.state_arrays()
    path = tmp_path / "opt.ckpt"
    ckpt.save_arrays(path, state)
    loaded, _ = ckpt.load_arrays(path)
    w2 = T.Tensor(w.data.copy(), requires_grad=True)
    opt2 = nn.Adam({"w": w2}, lr=0.05)
    opt2.load_state_arrays(loaded)
    # one more step from restored state matches one more step from live state
    for o, wt in ((opt, w), (opt2, w2)):
        loss = T.tsum(T.mul(wt, wt))
        o.zero_grad()
        loss.backward()
        o.step()
    assert np.array_equal(w.data, w2.data)


def test_load_state_rejects_shape_mismatch():
    m = TinyModel()
    arrays = m.state_arrays()
    key = next(iter(arrays))
    arrays[key] = np.zeros((1, 1))
    with pytest.raises(ValueError):
        m.load_state_arrays(arrays)
