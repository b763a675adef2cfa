"""Flat INI configuration for the pipeline.

Every key has a default; unknown sections or keys are hard errors (typos must
not silently fall back to defaults). All validation problems are collected
and reported together.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields

from .motionvae import MotionVAEConfig
from .nerf import NeRFConfig
from .postnet import PostNetConfig
from .syncexpert import SyncExpertConfig


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


@dataclass
class DataConfig:
    num_speakers: int = 8
    utterances_per_speaker: int = 4
    frames_per_utterance: int = 200
    feature_dim: int = 64
    pose_amplitude: float = 1.0
    domain_shift_seed: int = 0

    def __post_init__(self):
        if min(self.num_speakers, self.utterances_per_speaker,
               self.frames_per_utterance, self.feature_dim) < 1:
            raise ValueError("data sizes must be positive")


@dataclass
class TrainConfig:
    seed: int = 0
    sync_steps: int = 1500
    sync_batch: int = 64
    sync_lr: float = 1e-3
    vae_steps: int = 10000
    vae_batch: int = 4
    vae_crop: int = 64
    vae_lr: float = 1e-3
    postnet_steps: int = 800
    postnet_batch: int = 4
    postnet_crop: int = 48
    postnet_lr: float = 5e-4
    nerf_head_steps: int = 2000
    nerf_torso_steps: int = 1500
    nerf_rays: int = 128
    nerf_lr: float = 5e-4
    nerf_torso_frames: int = 8
    render_frames: int = 6
    temperature: float = 0.0

    def __post_init__(self):
        steps = [self.sync_steps, self.vae_steps, self.postnet_steps,
                 self.nerf_head_steps, self.nerf_torso_steps]
        if any(s < 1 for s in steps):
            raise ValueError("all step counts must be positive")


@dataclass
class PipelineConfig:
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    syncexpert: SyncExpertConfig = field(default_factory=SyncExpertConfig)
    vae: MotionVAEConfig = field(default_factory=MotionVAEConfig)
    postnet: PostNetConfig = field(default_factory=PostNetConfig)
    nerf: NeRFConfig = field(default_factory=NeRFConfig)

    def to_dict(self) -> dict:
        return {f.name: dataclasses.asdict(getattr(self, f.name))
                for f in fields(self)}

    def hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:12]


def _convert(raw: str, default, key: str, errors: list[str]):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            vals = tuple(float(v) for v in raw.split(","))
            if len(vals) != len(default):
                raise ValueError(f"expected {len(default)} values")
            return vals
        return raw
    except ValueError as exc:
        errors.append(f"{key}: cannot parse {raw!r} ({exc})")
        return default


def load_config(path=None, text: str | None = None) -> PipelineConfig:
    """Parse an INI file (or literal text) into a PipelineConfig.

    Raises ConfigError listing every unknown section/key, parse failure, and
    constraint violation found.
    """
    parser = configparser.ConfigParser()
    if text is not None:
        parser.read_string(text)
    elif path is not None:
        with open(path) as fh:
            parser.read_file(fh)
    errors: list[str] = []
    section_types = {f.name: f.default_factory for f in fields(PipelineConfig)}
    kwargs = {}
    for name, factory in section_types.items():
        defaults = factory()
        known = {f.name: getattr(defaults, f.name) for f in fields(defaults)}
        values = {}
        if parser.has_section(name):
            for key, raw in parser.items(name):
                if key not in known:
                    errors.append(f"[{name}] unknown key {key!r}")
                    continue
                values[key] = _convert(raw, known[key], f"[{name}] {key}", errors)
        try:
            kwargs[name] = type(defaults)(**{**known, **values})
        except ValueError as exc:
            errors.append(f"[{name}]: {exc}")
            kwargs[name] = defaults
    for section in parser.sections():
        if section not in section_types:
            errors.append(f"unknown section [{section}]")
    if errors:
        raise ConfigError(errors)
    return PipelineConfig(**kwargs)


def write_example(path) -> None:
    """Write an INI file holding every key at its default value."""
    cfg = PipelineConfig()
    parser = configparser.ConfigParser()
    for name, section in cfg.to_dict().items():
        parser[name] = {k: (",".join(str(x) for x in v) if isinstance(v, (tuple, list))
                            else str(v))
                        for k, v in section.items()}
    with open(path, "w") as fh:
        parser.write(fh)
