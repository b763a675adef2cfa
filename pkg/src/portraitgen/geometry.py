"""Face mesh model, landmark extraction, normalization, temporal smoothing.

The mesh is an affine model over a mean shape plus identity and expression
bases; landmarks are 68 selected vertices expressed as offsets from the mean
mesh. All operations here are pure numpy.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

NUM_LANDMARKS = 68
FRAME_RATE = 25.0

_LM_MAGIC = b"PGLMSEQ1"


@dataclass
class MeshBasis:
    mean_mesh: np.ndarray       # (V, 3)
    identity_basis: np.ndarray  # (V, 3, K_i)
    expression_basis: np.ndarray  # (V, 3, K_e)

    def __post_init__(self):
        if self.mean_mesh.ndim != 2 or self.mean_mesh.shape[1] != 3:
            raise ValueError(f"mean mesh must be (V, 3), got {self.mean_mesh.shape}")
        for name, b in (("identity", self.identity_basis), ("expression", self.expression_basis)):
            if b.shape[:2] != self.mean_mesh.shape or b.shape[2] < 1:
                raise ValueError(f"{name} basis shape {b.shape} incompatible with mesh {self.mean_mesh.shape}")
            if not np.isfinite(b).all():
                raise ValueError(f"{name} basis contains non-finite values")

    @property
    def num_vertices(self) -> int:
        return self.mean_mesh.shape[0]


@dataclass
class LandmarkSequence:
    frames: np.ndarray  # (T, 68, 3), offsets from the mean mesh
    frame_rate: float = FRAME_RATE

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[1:] != (NUM_LANDMARKS, 3):
            raise ValueError(f"landmark frames must be (T, 68, 3), got {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise ValueError("landmark sequence needs at least one frame")
        if not np.isfinite(self.frames).all():
            raise ValueError("landmark sequence contains NaN/inf")

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclass
class NormalizationStats:
    mean: np.ndarray  # (68, 3)
    std: np.ndarray   # (68, 3), clamped to >= floor
    floor: float
    clamped: np.ndarray = field(default=None)  # bool (68, 3), std hit the floor

    def __post_init__(self):
        if self.clamped is None:
            self.clamped = np.zeros_like(self.std, dtype=bool)
        if (self.std < self.floor - 1e-15).any() or self.floor <= 0:
            raise ValueError("normalization std below floor")


def make_synthetic_basis(num_vertices: int = 468, k_id: int = 16, k_exp: int = 16,
                         seed: int = 0) -> MeshBasis:
    """Random smooth basis standing in for a real morphable model."""
    rng = np.random.default_rng(seed)
    # mean mesh on a unit sphere-ish blob so landmark offsets stay O(1)
    pts = rng.standard_normal((num_vertices, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    b_id = rng.standard_normal((num_vertices, 3, k_id)) / np.sqrt(k_id)
    b_exp = rng.standard_normal((num_vertices, 3, k_exp)) / np.sqrt(k_exp)
    return MeshBasis(mean_mesh=pts, identity_basis=b_id, expression_basis=b_exp)


def default_landmark_indices(num_vertices: int = 468, seed: int = 1) -> np.ndarray:
    rng = np.random.default_rng(seed)
    idx = rng.choice(num_vertices, size=NUM_LANDMARKS, replace=False)
    return np.sort(idx)


def validate_landmark_indices(indices: np.ndarray, num_vertices: int) -> np.ndarray:
    indices = np.asarray(indices)
    if indices.shape != (NUM_LANDMARKS,) or len(set(indices.tolist())) != NUM_LANDMARKS:
        raise ValueError(f"need {NUM_LANDMARKS} distinct landmark indices, got shape {indices.shape}")
    if indices.min() < 0 or indices.max() >= num_vertices:
        raise IndexError(f"landmark index out of range for {num_vertices} vertices")
    return indices


def assemble_mesh(basis: MeshBasis, identity: np.ndarray, expression: np.ndarray) -> np.ndarray:
    """Affine mesh: mean + identity basis @ i + expression basis @ e."""
    identity = np.asarray(identity, dtype=np.float64)
    expression = np.asarray(expression, dtype=np.float64)
    if identity.shape != (basis.identity_basis.shape[2],):
        raise ValueError(f"identity code shape {identity.shape} vs basis K_i={basis.identity_basis.shape[2]}")
    if expression.shape != (basis.expression_basis.shape[2],):
        raise ValueError(f"expression code shape {expression.shape} vs basis K_e={basis.expression_basis.shape[2]}")
    return (basis.mean_mesh
            + basis.identity_basis @ identity
            + basis.expression_basis @ expression)


def select_landmarks(mesh: np.ndarray, mean_mesh: np.ndarray, indices: np.ndarray) -> np.ndarray:
    """68 key-point offsets from the mean mesh, shape (68, 3)."""
    indices = validate_landmark_indices(indices, mesh.shape[0])
    return (mesh - mean_mesh)[indices]


def fit_normalization(train: LandmarkSequence, floor: float = 1e-4) -> NormalizationStats:
    """Per-point mean/std over the training frames; degenerate stds clamp to
    the floor and are recorded."""
    if len(train) < 2:
        raise ValueError("fitting normalization needs at least 2 frames")
    mu = train.frames.mean(axis=0)
    sd = train.frames.std(axis=0)
    clamped = sd < floor
    sd = np.maximum(sd, floor)
    return NormalizationStats(mean=mu, std=sd, floor=floor, clamped=clamped)


def apply_normalization(seq: LandmarkSequence, stats: NormalizationStats) -> LandmarkSequence:
    return LandmarkSequence((seq.frames - stats.mean) / stats.std, seq.frame_rate)


def invert_normalization(seq: LandmarkSequence, stats: NormalizationStats) -> LandmarkSequence:
    return LandmarkSequence(seq.frames * stats.std + stats.mean, seq.frame_rate)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Truncated normalized Gaussian, radius ceil(3*sigma)."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = int(np.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_smooth(seq: LandmarkSequence, sigma: float = 1.0) -> LandmarkSequence:
    """Per-coordinate temporal convolution with reflect padding; length preserved."""
    kernel = gaussian_kernel(sigma)
    radius = len(kernel) // 2
    flat = seq.frames.reshape(len(seq), -1)
    padded = np.pad(flat, ((radius, radius), (0, 0)), mode="reflect") if len(seq) > 1 \
        else np.repeat(flat, 2 * radius + 1, axis=0)
    out = np.empty_like(flat)
    for j in range(flat.shape[1]):
        out[:, j] = np.convolve(padded[:, j], kernel, mode="valid")
    return LandmarkSequence(out.reshape(seq.frames.shape), seq.frame_rate)


def smooth_array(frames: np.ndarray, sigma: float = 1.0) -> np.ndarray:
    """gaussian_smooth for a raw (T, ...) array (used by the synthetic corpus)."""
    seq = LandmarkSequence(frames) if frames.shape[1:] == (NUM_LANDMARKS, 3) else None
    if seq is not None:
        return gaussian_smooth(seq, sigma).frames
    kernel = gaussian_kernel(sigma)
    radius = len(kernel) // 2
    flat = frames.reshape(frames.shape[0], -1)
    padded = np.pad(flat, ((radius, radius), (0, 0)), mode="reflect")
    out = np.empty_like(flat)
    for j in range(flat.shape[1]):
        out[:, j] = np.convolve(padded[:, j], kernel, mode="valid")
    return out.reshape(frames.shape)


# -- file formats ------------------------------------------------------------


def save_landmarks(path, seq: LandmarkSequence) -> None:
    """Binary landmark file: magic, version, T, fps, float64 LE frames."""
    with open(path, "wb") as f:
        f.write(_LM_MAGIC)
        f.write(struct.pack("<I", 1))
        f.write(struct.pack("<Q", len(seq)))
        f.write(struct.pack("<d", seq.frame_rate))
        f.write(seq.frames.astype("<f8").tobytes())


def load_landmarks(path) -> LandmarkSequence:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _LM_MAGIC:
            raise ValueError(f"{path}: not a landmark file (magic {magic!r})")
        (version,) = struct.unpack("<I", f.read(4))
        if version != 1:
            raise ValueError(f"{path}: unsupported landmark file version {version}")
        (t,) = struct.unpack("<Q", f.read(8))
        (fps,) = struct.unpack("<d", f.read(8))
        frames = np.frombuffer(f.read(), dtype="<f8").reshape(t, NUM_LANDMARKS, 3)
    return LandmarkSequence(frames.copy(), fps)


def export_landmarks_csv(path, seq: LandmarkSequence) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["frame", "point", "x", "y", "z"])
        for t in range(len(seq)):
            for p in range(NUM_LANDMARKS):
                x, y, z = seq.frames[t, p]
                writer.writerow([t, p, repr(x), repr(y), repr(z)])
