"""Landmark-conditioned head radiance field and head-aware torso field.

Rendering follows the discrete volume-rendering quadrature: stratified depth
samples, alpha compositing with accumulated transmittance, and a known
background color taking the residual transmittance. The head field lives in
head-canonical space (camera rays are moved by the inverse head pose); the
torso field lives in world space with a fixed canonical viewing direction and
receives the head render as a per-pixel condition, plus the flattened head
pose and the landmark condition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint as ckpt
from . import nn
from . import tensor as T
from .scene import Camera, OBJ_TORSO

COND_DIM = 3 * 204  # three neighboring frames of 68x3 landmarks
POSE_DIM = 12


@dataclass
class NeRFConfig:
    trunk_layers: int = 11
    hidden: int = 256
    cond_layers: int = 3
    cond_hidden: int = 128
    pe_bands_x: int = 10
    pe_bands_d: int = 4
    n_samples: int = 64
    near: float = 2.0
    far: float = 4.6
    density_scale: float = 25.0
    # scene-bound normalization applied to positions before encoding
    center: tuple = (0.0, -0.2, 3.2)
    radius: float = 2.3

    def __post_init__(self):
        if min(self.trunk_layers, self.hidden, self.cond_layers, self.cond_hidden,
               self.pe_bands_x, self.pe_bands_d) < 1 or self.n_samples < 2:
            raise ValueError("NeRF config sizes must be positive (n_samples >= 2)")
        if not self.near < self.far:
            raise ValueError("near bound must precede far bound")


def validate_pose(pose: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (3, 4):
        raise ValueError(f"head pose must be (3, 4), got {pose.shape}")
    r = pose[:, :3]
    if np.abs(r.T @ r - np.eye(3)).max() > tol or abs(np.linalg.det(r) - 1.0) > tol:
        raise ValueError("head pose rotation is not orthonormal")
    return pose


def validate_rays(origins: np.ndarray, dirs: np.ndarray, near: float, far: float):
    if not near < far:
        raise ValueError(f"ray bounds inverted: near={near}, far={far}")
    norms = np.linalg.norm(dirs, axis=-1)
    if np.abs(norms - 1.0).max() > 1e-9:
        raise ValueError("ray directions must be unit vectors")
    return origins, dirs


def positional_encoding(x: np.ndarray, bands: int) -> np.ndarray:
    """[x, sin(2^k pi x), cos(2^k pi x)] for k < bands; x expected O(1)."""
    outs = [x]
    for k in range(bands):
        f = (2.0 ** k) * np.pi
        outs.append(np.sin(f * x))
        outs.append(np.cos(f * x))
    return np.concatenate(outs, axis=-1)


class RadianceField(nn.Module):
    """MLP radiance field; color through a sigmoid, density through a scaled
    softplus, so the activation contracts hold for any parameters."""

    def __init__(self, config: NeRFConfig, extra_dim: int = 0, seed: int = 0):
        rng = np.random.default_rng([seed, 17])
        self.config = config
        self.extra_dim = extra_dim
        dims_x = 3 * (1 + 2 * config.pe_bands_x)
        dims_d = 3 * (1 + 2 * config.pe_bands_d)
        cond_dims = [COND_DIM] + [config.cond_hidden] * config.cond_layers
        self.cond_mlp = [nn.Affine(cond_dims[i], cond_dims[i + 1], rng=rng)
                         for i in range(config.cond_layers)]
        in_dim = dims_x + config.cond_hidden + extra_dim
        trunk_dims = [in_dim] + [config.hidden] * config.trunk_layers
        self.trunk = [nn.Affine(trunk_dims[i], trunk_dims[i + 1], rng=rng)
                      for i in range(config.trunk_layers)]
        self.density_head = nn.Affine(config.hidden, 1, rng=rng)
        self.color_hidden = nn.Affine(config.hidden + dims_d, config.hidden // 2, rng=rng)
        self.color_head = nn.Affine(config.hidden // 2, 3, rng=rng)

    def encode_condition(self, cond):
        h = cond if isinstance(cond, T.Tensor) else T.Tensor(np.asarray(cond))
        for layer in self.cond_mlp:
            h = T.relu(layer(h))
        return h

    def __call__(self, x_enc, d_enc, cond_emb, extra=None):
        """x_enc: (N, Dx), d_enc: (N, Dd), cond_emb: (N, H) -> (rgb (N,3), sigma (N,))."""
        parts = [x_enc if isinstance(x_enc, T.Tensor) else T.Tensor(x_enc), cond_emb]
        if self.extra_dim:
            if extra is None:
                raise ValueError("field expects extra per-ray inputs")
            parts.append(extra if isinstance(extra, T.Tensor) else T.Tensor(extra))
        h = T.concat(parts, axis=1)
        for layer in self.trunk:
            h = T.relu(layer(h))
        sigma = T.mul(T.softplus(T.reshape(self.density_head(h), (-1,))),
                      self.config.density_scale)
        dd = d_enc if isinstance(d_enc, T.Tensor) else T.Tensor(d_enc)
        ch = T.relu(self.color_hidden(T.concat([h, dd], axis=1)))
        rgb = T.sigmoid(self.color_head(ch))
        return rgb, sigma

    def eval_points(self, x: np.ndarray, d: np.ndarray, cond: np.ndarray,
                    extra: np.ndarray | None = None):
        """Numpy convenience: raw positions/directions/condition -> (rgb, sigma)
        arrays, no gradient tracking."""
        x = np.asarray(x, dtype=np.float64)
        if not np.isfinite(x).all() or not np.isfinite(np.asarray(d)).all():
            raise ValueError("field input contains NaN/inf")
        xn = (x - np.asarray(self.config.center)) / self.config.radius
        x_enc = positional_encoding(xn, self.config.pe_bands_x)
        d_enc = positional_encoding(np.asarray(d, dtype=np.float64), self.config.pe_bands_d)
        if cond.ndim == 1:
            cond = np.broadcast_to(cond, (x.shape[0], cond.shape[0]))
        with T.no_grad():
            emb = self.encode_condition(cond)
            rgb, sigma = self(x_enc, d_enc, emb, extra)
        return rgb.data, sigma.data

    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = {"config": vars(self.config), "extra_dim": self.extra_dim}
        meta.update(extra_meta or {})
        ckpt.save_arrays(path, self.state_arrays(), meta=meta)

    @classmethod
    def load(cls, path) -> "RadianceField":
        arrays, meta = ckpt.load_arrays(path)
        cfg_dict = dict(meta["config"])
        cfg_dict["center"] = tuple(cfg_dict["center"])
        field = cls(NeRFConfig(**cfg_dict), extra_dim=meta["extra_dim"])
        field.load_state_arrays(arrays)
        field.set_training(False)
        return field


def make_head_field(config: NeRFConfig, seed: int = 0) -> RadianceField:
    return RadianceField(config, extra_dim=0, seed=seed)


def make_torso_field(config: NeRFConfig, seed: int = 0) -> RadianceField:
    # extra inputs: per-pixel head color (3) + flattened head pose (12)
    return RadianceField(config, extra_dim=3 + POSE_DIM, seed=seed)


# -- quadrature ----------------------------------------------------------------


def sample_depths(n_rays: int, n_samples: int, near: float, far: float,
                  rng: np.random.Generator | None = None) -> np.ndarray:
    """Stratified depths (n_rays, n_samples); midpoints when rng is None."""
    if n_samples < 2:
        raise ValueError("need at least 2 samples per ray")
    edges = np.linspace(near, far, n_samples + 1)
    lo, width = edges[:-1], edges[1] - edges[0]
    u = rng.random((n_rays, n_samples)) if rng is not None else 0.5
    return lo[None, :] + u * width


def composite(sigma, rgb, t_samples: np.ndarray, far: float, background: np.ndarray):
    """Discrete quadrature along rays.

    sigma: (N, S) Tensor/array, rgb: (N, S, 3), t_samples: (N, S) ascending.
    Returns (color (N,3), weights (N,S), residual transmittance (N,)), all
    Tensors so gradients can flow into sigma/rgb.
    """
    sigma = sigma if isinstance(sigma, T.Tensor) else T.Tensor(np.asarray(sigma, dtype=np.float64))
    rgb = rgb if isinstance(rgb, T.Tensor) else T.Tensor(np.asarray(rgb, dtype=np.float64))
    deltas = np.diff(t_samples, axis=1)
    deltas = np.concatenate([deltas, (far - t_samples[:, -1:])], axis=1)  # (N, S)
    a = T.mul(sigma, T.Tensor(deltas))
    total = T.cumsum(a, axis=1)
    prior = T.add(total, T.mul(a, -1.0))  # exclusive cumulative optical depth
    trans = T.texp(T.mul(prior, -1.0))
    alpha = 1.0 - T.texp(T.mul(a, -1.0))
    weights = T.mul(trans, alpha)
    residual = T.texp(T.mul(total[:, -1], -1.0))
    bg = np.asarray(background, dtype=np.float64)
    color = T.add(T.tsum(T.mul(T.reshape(weights, (*weights.shape, 1)), rgb), axis=1),
                  T.mul(T.reshape(residual, (-1, 1)), T.Tensor(bg[None, :])))
    return color, weights, residual


def render_rays(field: RadianceField, origins: np.ndarray, dirs: np.ndarray,
                cond: np.ndarray, background, n_samples: int | None = None,
                rng: np.random.Generator | None = None,
                extra: np.ndarray | None = None, track: bool = False,
                enc_dirs: np.ndarray | None = None):
    """Render a batch of rays through `field`.

    cond: (612,) shared or (N, 612) per-ray; extra: (N, E) per-ray inputs for
    the torso field (tiled across depth samples). enc_dirs overrides the
    viewing direction fed to the field (the torso field sees a fixed canonical
    direction while marching along the true camera rays). With track=False the
    graph is not recorded (inference).
    """
    cfg = field.config
    n_samples = n_samples or cfg.n_samples
    origins, dirs = validate_rays(origins, dirs, cfg.near, cfg.far)
    n = origins.shape[0]
    t_samples = sample_depths(n, n_samples, cfg.near, cfg.far, rng)
    pts = origins[:, None, :] + t_samples[..., None] * dirs[:, None, :]
    xn = (pts.reshape(-1, 3) - np.asarray(cfg.center)) / cfg.radius
    x_enc = positional_encoding(xn, cfg.pe_bands_x)
    view = dirs if enc_dirs is None else np.asarray(enc_dirs, dtype=np.float64)
    d_enc = positional_encoding(np.repeat(view, n_samples, axis=0), cfg.pe_bands_d)
    if cond.ndim == 1:
        cond_pts = np.broadcast_to(cond, (n * n_samples, cond.shape[0]))
    else:
        cond_pts = np.repeat(cond, n_samples, axis=0)
    extra_pts = None if extra is None else np.repeat(extra, n_samples, axis=0)

    def run():
        emb = field.encode_condition(cond_pts)
        rgb, sigma = field(x_enc, d_enc, emb, extra_pts)
        rgb = T.reshape(rgb, (n, n_samples, 3))
        sigma = T.reshape(sigma, (n, n_samples))
        return composite(sigma, rgb, t_samples, cfg.far, background)

    if track:
        return run()
    with T.no_grad():
        return run()


# -- frame rendering -------------------------------------------------------------


def canonical_rays(camera: Camera, pose: np.ndarray):
    """Camera rays moved into head-canonical space by the inverse pose."""
    o, d = camera.rays()
    r, t = pose[:, :3], pose[:, 3]
    return (o - t) @ r, d @ r


def render_frame(head_field: RadianceField, torso_field: RadianceField | None,
                 cond: np.ndarray, pose: np.ndarray, camera: Camera,
                 background, n_samples: int | None = None, head_aware: bool = True,
                 chunk: int = 4096):
    """Full-frame render: head pass first, then the torso pass composited over
    the head image; returns (H, W, 3)."""
    pose = validate_pose(pose)
    h, w = camera.height, camera.width
    oh, dh = canonical_rays(camera, pose)
    head_img = np.empty((h * w, 3))
    for s in range(0, h * w, chunk):
        color, _, _ = render_rays(head_field, oh[s:s + chunk], dh[s:s + chunk],
                                  cond, background, n_samples)
        head_img[s:s + chunk] = color.data
    if torso_field is None:
        return head_img.reshape(h, w, 3)
    o, d = camera.rays()
    d0 = np.zeros_like(d)
    d0[:, 2] = 1.0  # fixed canonical viewing direction fed to the field
    pose_flat = np.broadcast_to(pose.reshape(-1), (h * w, POSE_DIM))
    c_head = head_img if head_aware else np.zeros_like(head_img)
    out = np.empty((h * w, 3))
    for s in range(0, h * w, chunk):
        extra = np.concatenate([c_head[s:s + chunk], pose_flat[s:s + chunk]], axis=1)
        color, _, _ = render_rays(torso_field, o[s:s + chunk], d[s:s + chunk],
                                  cond, head_img[s:s + chunk], n_samples,
                                  extra=extra, enc_dirs=d0[s:s + chunk])
        out[s:s + chunk] = color.data
    return out.reshape(h, w, 3)


# -- conditioning -----------------------------------------------------------------


def build_conditions(norm_frames: np.ndarray) -> np.ndarray:
    """(T, 68, 3) normalized landmarks -> (T, 612) three-frame windows with
    clamped boundaries."""
    t = norm_frames.shape[0]
    flat = norm_frames.reshape(t, -1)
    prev = flat[np.maximum(np.arange(t) - 1, 0)]
    nxt = flat[np.minimum(np.arange(t) + 1, t - 1)]
    return np.concatenate([prev, flat, nxt], axis=1)


# -- training --------------------------------------------------------------------


@dataclass
class NeRFDataset:
    frames: np.ndarray      # (T, H, W, 3)
    masks: np.ndarray       # (T, H, W) object ids
    poses: np.ndarray       # (T, 3, 4)
    conditions: np.ndarray  # (T, 612)
    camera: Camera
    background: np.ndarray  # (3,)


def train_nerf(stage: str, field: RadianceField, dataset: NeRFDataset,
               frame_indices: list[int], steps: int, rays_per_batch: int = 256,
               lr: float = 5e-4, seed: int = 0, head_field: RadianceField | None = None,
               n_samples: int | None = None, head_aware: bool = True,
               divergence_limit: float = 1e3, callback=None):
    """Photometric ray-batch training; returns loss history.

    stage 'head': trains on non-torso pixels with rays in canonical head
    space. stage 'torso': trains on all pixels over the (frozen) head render
    as per-ray background; requires head_field.
    """
    if stage not in ("head", "torso"):
        raise ValueError(f"unknown stage {stage!r}")
    rng = np.random.default_rng([seed, 37])
    cfg = field.config
    n_samples = n_samples or cfg.n_samples
    opt = nn.Adam(field.parameters(), lr=lr)
    cam = dataset.camera
    o_cam, d_cam = cam.rays()

    head_cache: dict[int, np.ndarray] = {}
    if stage == "torso":
        if head_field is None:
            raise ValueError("torso stage requires the frozen head field")
        for fi in frame_indices:
            oh, dh = canonical_rays(cam, dataset.poses[fi])
            img = np.empty((cam.height * cam.width, 3))
            for s in range(0, img.shape[0], 4096):
                color, _, _ = render_rays(head_field, oh[s:s + 4096], dh[s:s + 4096],
                                          dataset.conditions[fi], dataset.background,
                                          n_samples)
                img[s:s + 4096] = color.data
            head_cache[fi] = img

    history: list[float] = []
    for step in range(steps):
        fi = int(frame_indices[rng.integers(0, len(frame_indices))])
        gt_flat = dataset.frames[fi].reshape(-1, 3)
        if stage == "head":
            valid = np.nonzero(dataset.masks[fi].reshape(-1) != OBJ_TORSO)[0]
            pix = valid[rng.integers(0, len(valid), size=rays_per_batch)]
            oh, dh = canonical_rays(cam, dataset.poses[fi])
            color, _, _ = render_rays(field, oh[pix], dh[pix],
                                      dataset.conditions[fi], dataset.background,
                                      n_samples, rng=rng, track=True)
        else:
            pix = rng.integers(0, gt_flat.shape[0], size=rays_per_batch)
            c_head = head_cache[fi][pix]
            d0 = np.zeros((len(pix), 3))
            d0[:, 2] = 1.0
            pose_flat = np.broadcast_to(dataset.poses[fi].reshape(-1),
                                        (len(pix), POSE_DIM))
            extra = np.concatenate(
                [c_head if head_aware else np.zeros_like(c_head), pose_flat], axis=1)
            color, _, _ = render_rays(field, o_cam[pix], d_cam[pix],
                                      dataset.conditions[fi], c_head,
                                      n_samples, rng=rng, extra=extra,
                                      track=True, enc_dirs=d0)
        diff = color - T.Tensor(gt_flat[pix])
        loss = T.tsum(T.mul(diff, diff))
        val = loss.item()
        if not np.isfinite(val) or val > divergence_limit * rays_per_batch:
            raise FloatingPointError(f"NeRF {stage} training diverged at step {step}: {val}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(val / rays_per_batch)
        if callback is not None and (step + 1) % 100 == 0:
            callback(step, history[-1])
    field.set_training(False)
    return history


def cast_field(field: RadianceField, dtype=np.float32) -> RadianceField:
    """Copy of the field with parameters cast (32-bit rendering mode)."""
    clone = RadianceField(field.config, extra_dim=field.extra_dim)
    for name, p in clone.parameters().items():
        p.data = field.parameters()[name].data.astype(dtype)
    clone.set_training(False)
    return clone
