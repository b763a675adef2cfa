"""Synthetic corpus generation and the injected target-domain shift."""

import numpy as np
import pytest

from portraitgen import corpus as cp
from portraitgen import geometry as geo


@pytest.fixture(scope="module")
def small_corpus():
    return cp.gen_corpus(num_speakers=3, utterances_per_speaker=2,
                         frames_per_utterance=60, seed=5)


def test_corpus_deterministic():
    a = cp.gen_corpus(2, 2, 40, seed=9)
    b = cp.gen_corpus(2, 2, 40, seed=9)
    for ua, ub in zip(a.utterances, b.utterances):
        assert np.array_equal(ua.audio.features, ub.audio.features)
        assert np.array_equal(ua.landmarks.frames, ub.landmarks.frames)


def test_audio_video_alignment(small_corpus):
    for u in small_corpus.utterances:
        assert len(u.audio) == cp.AUDIO_PER_VIDEO * len(u.landmarks)


def test_zero_audio_yields_identity_offset(small_corpus):
    prof = small_corpus.speakers[0]
    zero = cp.AudioFeatureSequence(np.zeros((40, cp.FEATURE_DIM)))
    lms = cp.landmarks_from_audio(prof, zero)
    assert np.abs(lms.frames - prof.offset).max() < 1e-12


def test_speaker_means_separated(small_corpus):
    means = {}
    for u in small_corpus.utterances:
        means.setdefault(u.speaker_id, []).append(u.landmarks.frames.mean(axis=0))
    centers = {s: np.mean(v, axis=0) for s, v in means.items()}
    ids = sorted(centers)
    for i in ids:
        for j in ids:
            if i < j:
                gap = np.linalg.norm(centers[i] - centers[j])
                off = np.linalg.norm(small_corpus.speakers[i].offset
                                     - small_corpus.speakers[j].offset)
                assert gap > 0.5 * off  # dominated by the identity offsets


def test_articulation_lipschitz(small_corpus):
    for prof in small_corpus.speakers:
        assert np.linalg.norm(prof.articulation, 2) <= 1.0 + 1e-12
    # smooth map: output perturbation bounded by input perturbation
    prof = small_corpus.speakers[0]
    rng = np.random.default_rng(0)
    a = rng.standard_normal((20, cp.FEATURE_DIM))
    d = 1e-3 * rng.standard_normal((20, cp.FEATURE_DIM))
    base = prof.apply(a)
    pert = prof.apply(a + d)
    # tanh and 2:1 averaging are 1-Lipschitz, W has spectral norm <= 1
    assert np.linalg.norm(pert - base) <= np.linalg.norm(d) + 1e-9


def test_domain_shift_identity_is_noop(small_corpus):
    src = [u for u in small_corpus.utterances if u.speaker_id == 0][:1]
    tgt = cp.gen_target_domain(src, np.eye(3), np.zeros((68, 3)), seed=0)
    assert np.array_equal(tgt.utterances[0].landmarks.frames,
                          src[0].landmarks.frames)
    assert tgt.frames[0].shape[0] == len(src[0].landmarks)


def test_domain_shift_moves_mean_exactly(small_corpus):
    src = [u for u in small_corpus.utterances if u.speaker_id == 1][:1]
    scale, offset = cp.default_domain_shift(3)
    tgt = cp.gen_target_domain(src, scale, offset, seed=0)
    src_mean = src[0].landmarks.frames.mean(axis=0)
    tgt_mean = tgt.utterances[0].landmarks.frames.mean(axis=0)
    expected = np.einsum("ij,pj->pi", scale, src_mean) + offset
    assert np.abs(tgt_mean - expected).max() < 1e-9


def test_domain_shift_rejects_singular(small_corpus):
    src = small_corpus.utterances[:1]
    with pytest.raises(ValueError):
        cp.gen_target_domain(src, np.zeros((3, 3)), np.zeros((68, 3)))


def test_shift_recoverable_by_affine_regression(small_corpus):
    # the injected shift must be exactly identifiable from paired data
    src = [u for u in small_corpus.utterances if u.speaker_id == 0]
    scale, offset = cp.default_domain_shift(1)
    tgt = cp.gen_target_domain(src, scale, offset, seed=0)
    x = src[0].landmarks.frames.reshape(-1, 3)
    y = tgt.utterances[0].landmarks.frames.reshape(-1, 3)
    # per-point offsets: solve for scale on centered data of one point
    p = 7
    xs = src[0].landmarks.frames[:, p]
    ys = tgt.utterances[0].landmarks.frames[:, p]
    xc, yc = xs - xs.mean(0), ys - ys.mean(0)
    a_hat, *_ = np.linalg.lstsq(xc, yc, rcond=None)
    assert np.abs(a_hat.T - scale).max() < 1e-8
    b_hat = ys.mean(0) - scale @ xs.mean(0)
    assert np.abs(b_hat - offset[p]).max() < 1e-8


def test_corpus_roundtrip(tmp_path, small_corpus):
    src = [u for u in small_corpus.utterances if u.speaker_id == 0][:1]
    scale, offset = cp.default_domain_shift(0)
    tgt = cp.gen_target_domain(src, scale, offset, seed=0)
    stats = geo.fit_normalization(tgt.utterances[0].landmarks)
    cp.save_corpus(tmp_path, small_corpus, tgt, stats)
    utts, manifest = cp.load_corpus(tmp_path)
    assert len(utts) == len(small_corpus.utterances)
    for a, b in zip(utts, small_corpus.utterances):
        assert np.array_equal(a.audio.features, b.audio.features)
        assert np.array_equal(a.landmarks.frames, b.landmarks.frames)
        assert a.split == b.split
    back = cp.load_target(tmp_path)
    assert np.array_equal(back.utterances[0].landmarks.frames,
                          tgt.utterances[0].landmarks.frames)
    assert np.array_equal(back.poses[0], tgt.poses[0])
    # frames round-trip through 8-bit PNG quantization
    assert np.abs(back.frames[0] - tgt.frames[0]).max() <= 1.0 / 510 + 1e-12
    assert np.array_equal(back.masks[0], tgt.masks[0])
    st = cp.load_norm_stats(tmp_path)
    assert np.array_equal(st.mean, stats.mean)
    assert np.array_equal(st.std, stats.std)


def test_rejects_bad_counts():
    with pytest.raises(ValueError):
        cp.gen_corpus(0, 1, 10)
