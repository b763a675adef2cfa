"""Analytic ground-truth scene: ellipsoid head, box torso, known background.

Rendering is closed-form ray/object intersection (no radiance field), so it
serves as an exact, deterministic oracle for training and evaluating the
neural renderer. The head lives in its own canonical space and is placed by a
per-frame rigid pose; the torso is static in world space and its top extends
up behind the head, so the head occludes the upper torso.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

OBJ_BACKGROUND = 0
OBJ_HEAD = 1
OBJ_TORSO = 2


@dataclass
class Camera:
    focal: float = 64.0
    width: int = 64
    height: int = 64
    cx: float | None = None
    cy: float | None = None

    def __post_init__(self):
        if self.cx is None:
            self.cx = self.width / 2.0
        if self.cy is None:
            self.cy = self.height / 2.0

    def rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-pixel origins/directions, each (H*W, 3); camera at the world origin
        looking along +z, image y increasing downward maps to world -y."""
        u, v = np.meshgrid(np.arange(self.width) + 0.5, np.arange(self.height) + 0.5)
        x = (u - self.cx) / self.focal
        y = -(v - self.cy) / self.focal
        d = np.stack([x, y, np.ones_like(x)], axis=-1).reshape(-1, 3)
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        o = np.zeros_like(d)
        return o, d


@dataclass
class SceneSpec:
    head_radii: tuple = (0.55, 0.70, 0.50)
    head_base_color: tuple = (0.80, 0.55, 0.45)
    # fixed random projection of the 68x3 landmark frame -> RGB modulation
    color_gain: float = 0.25
    color_seed: int = 7
    torso_center: tuple = (0.0, -0.75, 3.30)
    torso_halfsize: tuple = (0.85, 0.75, 0.40)
    torso_base_color: tuple = (0.25, 0.35, 0.60)
    background: tuple = (0.08, 0.10, 0.12)
    light_dir: tuple = (0.40, 0.60, -0.70)
    camera: Camera = field(default_factory=Camera)
    bounding_center: tuple = (0.0, -0.2, 3.2)
    bounding_radius: float = 2.3

    def landmark_color_matrix(self) -> np.ndarray:
        rng = np.random.default_rng(self.color_seed)
        m = rng.standard_normal((3, 68 * 3))
        return m / np.linalg.norm(m, axis=1, keepdims=True)

    def head_color(self, landmarks: np.ndarray) -> np.ndarray:
        """Per-frame head albedo driven by the landmark frame (68, 3)."""
        mod = np.tanh(self.landmark_color_matrix() @ landmarks.reshape(-1))
        return np.clip(np.asarray(self.head_base_color) + self.color_gain * mod, 0.05, 0.95)

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        d = json.loads(text)
        d["camera"] = Camera(**d["camera"])
        for k, v in d.items():
            if isinstance(v, list):
                d[k] = tuple(v)
        return cls(**d)


def default_pose() -> np.ndarray:
    """Head pose placing the canonical head above the torso, (3, 4)."""
    return np.hstack([np.eye(3), np.array([[0.0], [0.45], [3.20]])])


def pose_sequence(num_frames: int, seed: int = 0, amplitude: float = 1.0) -> np.ndarray:
    """Smooth nodding/turning head trajectory, (T, 3, 4)."""
    rng = np.random.default_rng(seed)
    t = np.arange(num_frames) / 25.0
    ph = rng.uniform(0, 2 * np.pi, size=6)
    yaw = amplitude * 0.25 * np.sin(2 * np.pi * 0.21 * t + ph[0])
    pitch = amplitude * 0.18 * np.sin(2 * np.pi * 0.13 * t + ph[1])
    roll = amplitude * 0.08 * np.sin(2 * np.pi * 0.17 * t + ph[2])
    tx = amplitude * 0.12 * np.sin(2 * np.pi * 0.11 * t + ph[3])
    ty = 0.45 + amplitude * 0.08 * np.sin(2 * np.pi * 0.19 * t + ph[4])
    tz = 3.20 + amplitude * 0.10 * np.sin(2 * np.pi * 0.07 * t + ph[5])
    poses = np.empty((num_frames, 3, 4))
    for i in range(num_frames):
        poses[i, :, :3] = _rotation(yaw[i], pitch[i], roll[i])
        poses[i, :, 3] = (tx[i], ty[i], tz[i])
    return poses


def _rotation(yaw: float, pitch: float, roll: float) -> np.ndarray:
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    return ry @ rx @ rz


def _intersect_ellipsoid(o, d, radii) -> tuple[np.ndarray, np.ndarray]:
    """Nearest positive hit of unit-centered ellipsoid; (t, normal)."""
    r = np.asarray(radii)
    os, ds = o / r, d / r
    a = (ds * ds).sum(-1)
    b = 2.0 * (os * ds).sum(-1)
    c = (os * os).sum(-1) - 1.0
    disc = b * b - 4 * a * c
    hit = disc >= 0
    t = np.full(o.shape[0], np.inf)
    sq = np.sqrt(np.maximum(disc, 0.0))
    t0 = (-b - sq) / (2 * a)
    t1 = (-b + sq) / (2 * a)
    tt = np.where(t0 > 1e-6, t0, t1)
    valid = hit & (tt > 1e-6)
    t[valid] = tt[valid]
    with np.errstate(invalid="ignore"):
        p = o + t[:, None] * d
        n = p / (r * r)
        norm = np.linalg.norm(n, axis=-1, keepdims=True)
        n = np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)
    return t, n


def _intersect_box(o, d, center, halfsize) -> tuple[np.ndarray, np.ndarray]:
    lo = np.asarray(center) - np.asarray(halfsize)
    hi = np.asarray(center) + np.asarray(halfsize)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - o) / d
        t2 = (hi - o) / d
    tmin = np.minimum(t1, t2).max(axis=-1)
    tmax = np.maximum(t1, t2).min(axis=-1)
    hit = (tmax >= np.maximum(tmin, 1e-6))
    t = np.where(hit, np.where(tmin > 1e-6, tmin, tmax), np.inf)
    p = o + t[:, None] * d
    # face normal: axis of largest |(p - center)/halfsize|
    q = (p - np.asarray(center)) / np.asarray(halfsize)
    axis = np.abs(q).argmax(axis=-1)
    n = np.zeros_like(p)
    n[np.arange(len(p)), axis] = np.sign(q[np.arange(len(p)), axis])
    return t, n


def _shade(color: np.ndarray, normal: np.ndarray, light_dir) -> np.ndarray:
    l = -np.asarray(light_dir, dtype=np.float64)
    l /= np.linalg.norm(l)
    lam = np.clip(normal @ l, 0.0, 1.0)
    return color * (0.55 + 0.45 * lam[:, None])


def render_ground_truth(scene: SceneSpec, landmarks: np.ndarray, pose: np.ndarray,
                        return_ids: bool = False):
    """Closed-form render, (H, W, 3) in [0, 1]; optionally per-pixel object ids."""
    cam = scene.camera
    o, d = cam.rays()
    r, t = pose[:, :3], pose[:, 3]
    # head in canonical space: transform rays by the inverse pose
    oh = (o - t) @ r  # R^T (o - t)
    dh = d @ r
    t_head, n_head = _intersect_ellipsoid(oh, dh, scene.head_radii)
    n_head_w = n_head @ r.T
    t_torso, n_torso = _intersect_box(o, d, scene.torso_center, scene.torso_halfsize)

    img = np.tile(np.asarray(scene.background), (o.shape[0], 1))
    ids = np.full(o.shape[0], OBJ_BACKGROUND, dtype=np.uint8)
    head_col = scene.head_color(landmarks)

    torso_vis = (t_torso < t_head) & np.isfinite(t_torso)
    head_vis = (t_head <= t_torso) & np.isfinite(t_head)
    img[torso_vis] = _shade(np.asarray(scene.torso_base_color), n_torso[torso_vis],
                            scene.light_dir)
    img[head_vis] = _shade(head_col, n_head_w[head_vis], scene.light_dir)
    ids[torso_vis] = OBJ_TORSO
    ids[head_vis] = OBJ_HEAD

    img = np.clip(img, 0.0, 1.0).reshape(cam.height, cam.width, 3)
    if return_ids:
        return img, ids.reshape(cam.height, cam.width)
    return img


def ray_hit_fraction(scene: SceneSpec) -> float:
    """Fraction of camera rays hitting the scene bounding sphere."""
    o, d = scene.camera.rays()
    oc = o - np.asarray(scene.bounding_center)
    b = 2.0 * (oc * d).sum(-1)
    c = (oc * oc).sum(-1) - scene.bounding_radius ** 2
    disc = b * b - 4 * c
    return float((disc >= 0).mean())


def silhouette_centroid(ids: np.ndarray, obj: int = OBJ_HEAD) -> tuple[float, float]:
    ys, xs = np.nonzero(ids == obj)
    return float(xs.mean()), float(ys.mean())
