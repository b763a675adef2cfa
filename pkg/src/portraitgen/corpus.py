"""Procedural training data: multi-speaker audio-feature/landmark corpus, a
shifted target-speaker domain, and analytically rendered target frames.

Audio features are synthetic (smoothed noise shaped by a phoneme-like segment
sequence) at 50 Hz; landmarks run at 25 fps, so every landmark frame pairs
with two audio frames. Each speaker owns a Lipschitz-bounded articulation map
and an identity offset. The target domain applies a known point-wise affine
shift to a corpus subset; the true shift is stored for evaluation only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import checkpoint as ckpt
from . import geometry as geo
from . import scene as sc

AUDIO_RATE = 50.0
FEATURE_DIM = 64
AUDIO_PER_VIDEO = 2  # 50 Hz features vs 25 fps landmarks


@dataclass
class AudioFeatureSequence:
    features: np.ndarray  # (T_a, D)
    frame_rate: float = AUDIO_RATE

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError(f"audio features must be (T_a, D), got {self.features.shape}")
        if not np.isfinite(self.features).all():
            raise ValueError("audio features contain NaN/inf")

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class SpeakerProfile:
    speaker_id: int
    articulation: np.ndarray  # (D, 204), spectral norm <= 1
    offset: np.ndarray        # (68, 3)

    def apply(self, features: np.ndarray) -> np.ndarray:
        """Audio features (2T, D) -> landmark frames (T, 68, 3), before smoothing."""
        half = features.reshape(-1, AUDIO_PER_VIDEO, features.shape[1]).mean(axis=1)
        raw = np.tanh(half @ self.articulation)
        return raw.reshape(-1, geo.NUM_LANDMARKS, 3)


@dataclass
class Utterance:
    utt_id: str
    speaker_id: int
    audio: AudioFeatureSequence
    landmarks: geo.LandmarkSequence
    split: str = "train"


@dataclass
class Corpus:
    utterances: list[Utterance]
    speakers: list[SpeakerProfile]
    seed: int

    def split(self, name: str) -> list[Utterance]:
        return [u for u in self.utterances if u.split == name]


@dataclass
class TargetSet:
    """Target-person data: shifted landmarks, audio, rendered frames, poses."""
    utterances: list[Utterance]     # landmarks already affine-shifted
    frames: list[np.ndarray]        # per utterance: (T, H, W, 3)
    masks: list[np.ndarray]         # per utterance: (T, H, W) object ids
    poses: list[np.ndarray]         # per utterance: (T, 3, 4)
    scene: sc.SceneSpec
    affine_scale: np.ndarray        # (3, 3) ground-truth shift, eval only
    affine_offset: np.ndarray       # (68, 3), eval only


def _make_speaker(speaker_id: int, base_map: np.ndarray, rng: np.random.Generator) -> SpeakerProfile:
    d = base_map.shape[0]
    indiv = rng.standard_normal(base_map.shape)
    w = 0.75 * base_map + 0.25 * indiv / np.linalg.norm(indiv, 2)
    w = w / max(np.linalg.norm(w, 2), 1e-12)  # spectral norm exactly <= 1
    offset = 0.35 * rng.standard_normal((geo.NUM_LANDMARKS, 3))
    return SpeakerProfile(speaker_id=speaker_id, articulation=w, offset=offset)


def _gen_audio(num_video_frames: int, feature_dim: int, phonemes: np.ndarray,
               rng: np.random.Generator) -> AudioFeatureSequence:
    """Piecewise phoneme segments plus noise, smoothed along time."""
    t_a = AUDIO_PER_VIDEO * num_video_frames
    feats = np.empty((t_a, feature_dim))
    pos = 0
    while pos < t_a:
        dur = int(rng.integers(4, 13))
        ph = phonemes[rng.integers(0, len(phonemes))]
        feats[pos:pos + dur] = ph
        pos += dur
    feats = feats[:t_a] + 0.15 * rng.standard_normal((t_a, feature_dim))
    feats = geo.smooth_array(feats, sigma=1.5)
    return AudioFeatureSequence(feats)


def landmarks_from_audio(profile: SpeakerProfile, audio: AudioFeatureSequence,
                         smooth_sigma: float = 1.0) -> geo.LandmarkSequence:
    raw = profile.apply(audio.features)
    smoothed = geo.smooth_array(raw, sigma=smooth_sigma)
    return geo.LandmarkSequence(smoothed + profile.offset)


def gen_corpus(num_speakers: int, utterances_per_speaker: int,
               frames_per_utterance: int = 200, feature_dim: int = FEATURE_DIM,
               seed: int = 0, holdout_fraction: float = 0.125) -> Corpus:
    """Deterministic multi-speaker corpus of paired audio/landmark utterances."""
    if num_speakers < 1 or utterances_per_speaker < 1 or frames_per_utterance < 1:
        raise ValueError("corpus counts must be >= 1")
    root = np.random.default_rng(seed)
    base_map = root.standard_normal((feature_dim, geo.NUM_LANDMARKS * 3))
    base_map /= np.linalg.norm(base_map, 2)
    phonemes = 1.2 * root.standard_normal((20, feature_dim))
    speakers = [_make_speaker(s, base_map, np.random.default_rng([seed, 1, s]))
                for s in range(num_speakers)]
    utterances = []
    n_holdout = max(1, int(round(holdout_fraction * utterances_per_speaker))) \
        if utterances_per_speaker > 1 else 0
    for s, prof in enumerate(speakers):
        for u in range(utterances_per_speaker):
            rng = np.random.default_rng([seed, 2, s, u])
            audio = _gen_audio(frames_per_utterance, feature_dim, phonemes, rng)
            lms = landmarks_from_audio(prof, audio)
            split = "val" if u >= utterances_per_speaker - n_holdout else "train"
            utterances.append(Utterance(f"s{s:03d}_u{u:03d}", s, audio, lms, split))
    return Corpus(utterances=utterances, speakers=speakers, seed=seed)


def apply_pointwise_affine(frames: np.ndarray, scale: np.ndarray,
                           offset: np.ndarray) -> np.ndarray:
    """l'[t, p] = scale @ l[t, p] + offset[p]."""
    return np.einsum("ij,tpj->tpi", scale, frames) + offset


def default_domain_shift(seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """A sizable, invertible per-point affine: anisotropic scale + small rotation
    + per-point offset."""
    rng = np.random.default_rng(seed)
    angle = np.deg2rad(6.0)
    rot = sc._rotation(angle, -angle / 2, angle / 3)
    scale = np.diag(rng.uniform(0.85, 1.2, size=3)) @ rot
    offset = 0.30 * rng.standard_normal((geo.NUM_LANDMARKS, 3))
    return scale, offset


def gen_target_domain(source: list[Utterance], scale: np.ndarray, offset: np.ndarray,
                      seed: int = 0, scene: sc.SceneSpec | None = None,
                      pose_amplitude: float = 1.0) -> TargetSet:
    """Shift a corpus subset into the target domain and render its frames."""
    scale = np.asarray(scale, dtype=np.float64)
    if scale.shape != (3, 3) or abs(np.linalg.det(scale)) < 1e-9:
        raise ValueError("domain-shift matrix must be an invertible 3x3")
    scene = scene or sc.SceneSpec()
    utterances, frames, masks, poses = [], [], [], []
    for k, src in enumerate(source):
        shifted = geo.LandmarkSequence(
            apply_pointwise_affine(src.landmarks.frames, scale, offset),
            src.landmarks.frame_rate)
        utt = Utterance(f"target_{k:03d}", -1, src.audio, shifted, src.split)
        pose_seq = sc.pose_sequence(len(shifted), seed=seed + 101 * k,
                                    amplitude=pose_amplitude)
        imgs = np.empty((len(shifted), scene.camera.height, scene.camera.width, 3))
        ids = np.empty((len(shifted), scene.camera.height, scene.camera.width), dtype=np.uint8)
        for t in range(len(shifted)):
            imgs[t], ids[t] = sc.render_ground_truth(
                scene, shifted.frames[t], pose_seq[t], return_ids=True)
        utterances.append(utt)
        frames.append(imgs)
        masks.append(ids)
        poses.append(pose_seq)
    return TargetSet(utterances=utterances, frames=frames, masks=masks, poses=poses,
                     scene=scene, affine_scale=scale, affine_offset=np.asarray(offset))


# -- on-disk layout -----------------------------------------------------------


def save_audio(path, audio: AudioFeatureSequence) -> None:
    ckpt.save_arrays(path, {"features": audio.features},
                     meta={"frame_rate": audio.frame_rate})


def load_audio(path) -> AudioFeatureSequence:
    arrays, meta = ckpt.load_arrays(path)
    return AudioFeatureSequence(arrays["features"], meta.get("frame_rate", AUDIO_RATE))


def save_corpus(root, corpus: Corpus, target: TargetSet | None = None,
                stats: geo.NormalizationStats | None = None) -> None:
    root = Path(root)
    (root / "feats").mkdir(parents=True, exist_ok=True)
    (root / "lms").mkdir(exist_ok=True)
    entries = []
    for u in corpus.utterances:
        save_audio(root / "feats" / f"{u.utt_id}.feat", u.audio)
        geo.save_landmarks(root / "lms" / f"{u.utt_id}.lms", u.landmarks)
        entries.append({"id": u.utt_id, "speaker": u.speaker_id, "split": u.split,
                        "features": f"feats/{u.utt_id}.feat",
                        "landmarks": f"lms/{u.utt_id}.lms"})
    manifest = {"seed": corpus.seed, "utterances": entries, "target": None}
    if target is not None:
        tdir = root / "target"
        for sub in ("feats", "lms", "frames", "masks"):
            (tdir / sub).mkdir(parents=True, exist_ok=True)
        tentries = []
        for k, u in enumerate(target.utterances):
            save_audio(tdir / "feats" / f"{u.utt_id}.feat", u.audio)
            geo.save_landmarks(tdir / "lms" / f"{u.utt_id}.lms", u.landmarks)
            for t in range(len(u.landmarks)):
                img = (target.frames[k][t] * 255.0).round().astype(np.uint8)
                Image.fromarray(img).save(tdir / "frames" / f"{u.utt_id}_{t:05d}.png")
                Image.fromarray(target.masks[k][t]).save(tdir / "masks" / f"{u.utt_id}_{t:05d}.png")
            ckpt.save_arrays(tdir / f"{u.utt_id}.poses", {"poses": target.poses[k]})
            tentries.append({"id": u.utt_id, "split": u.split,
                             "num_frames": len(u.landmarks)})
        (tdir / "scene.json").write_text(target.scene.to_json())
        # ground-truth shift: evaluation only, never read by training code
        ckpt.save_arrays(tdir / "truth_affine.eval",
                         {"scale": target.affine_scale, "offset": target.affine_offset})
        manifest["target"] = {"utterances": tentries}
    if stats is not None:
        ckpt.save_arrays(root / "norm_stats.ckpt",
                         {"mean": stats.mean, "std": stats.std,
                          "clamped": stats.clamped.astype(np.float64)},
                         meta={"floor": stats.floor})
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_norm_stats(root) -> geo.NormalizationStats:
    arrays, meta = ckpt.load_arrays(Path(root) / "norm_stats.ckpt")
    return geo.NormalizationStats(mean=arrays["mean"], std=arrays["std"],
                                  floor=meta["floor"],
                                  clamped=arrays["clamped"].astype(bool))


def load_corpus(root) -> tuple[list[Utterance], dict]:
    """Utterance list plus the raw manifest (target data loaded lazily)."""
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    utterances = []
    for e in manifest["utterances"]:
        utterances.append(Utterance(
            e["id"], e["speaker"],
            load_audio(root / e["features"]),
            geo.load_landmarks(root / e["landmarks"]),
            e["split"]))
    return utterances, manifest


def load_target(root) -> TargetSet:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest["target"] is None:
        raise FileNotFoundError(f"{root}: corpus has no target domain")
    tdir = root / "target"
    scene = sc.SceneSpec.from_json((tdir / "scene.json").read_text())
    truth, _ = ckpt.load_arrays(tdir / "truth_affine.eval")
    utterances, frames, masks, poses = [], [], [], []
    for e in manifest["target"]["utterances"]:
        uid = e["id"]
        audio = load_audio(tdir / "feats" / f"{uid}.feat")
        lms = geo.load_landmarks(tdir / "lms" / f"{uid}.lms")
        utterances.append(Utterance(uid, -1, audio, lms, e["split"]))
        n = e["num_frames"]
        imgs = np.empty((n, scene.camera.height, scene.camera.width, 3))
        ids = np.empty((n, scene.camera.height, scene.camera.width), dtype=np.uint8)
        for t in range(n):
            imgs[t] = np.asarray(Image.open(tdir / "frames" / f"{uid}_{t:05d}.png"),
                                 dtype=np.float64) / 255.0
            ids[t] = np.asarray(Image.open(tdir / "masks" / f"{uid}_{t:05d}.png"))
        frames.append(imgs)
        masks.append(ids)
        poses.append(ckpt.load_arrays(tdir / f"{uid}.poses")[0]["poses"])
    return TargetSet(utterances=utterances, frames=frames, masks=masks, poses=poses,
                     scene=scene, affine_scale=truth["scale"], affine_offset=truth["offset"])
