"""Project configuration: a strict YAML file plus one environment override.

Unknown keys are rejected at every level so typos fail loudly; the dataset
root can be overридden with the PUPPETRY_DATA_ROOT environment variable.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .dataset import FPS
from .errors import ConfigError
from .training import TrainingConfig

ENV_DATA_ROOT = "PUPPETRY_DATA_ROOT"


@dataclass
class RendererSettings:
    resolution: int = 64
    erosion_radius: int = 8
    perceptual: str = "gradient"   # "gradient" or "none"
    variant: str = "dilated"       # "dilated" or "strided"
    train_frames: int | None = None


@dataclass
class ProjectConfig:
    data_root: Path
    sequences: list = field(default_factory=list)
    target: str | None = None
    seed: int = 0
    holdout_fraction: float = 0.25
    training: TrainingConfig = field(default_factory=TrainingConfig)
    renderer: RendererSettings = field(default_factory=RendererSettings)
    fps: float = FPS  # fixed by the dataset convention

    def sequence_dirs(self):
        return [Path(self.data_root) / name for name in self.sequences]

    def target_dir(self):
        if not self.target:
            raise ConfigError("config has no `target` sequence")
        return Path(self.data_root) / self.target


_TRAINING_KEYS = {"learning_rate", "epochs", "decay_epochs", "batch_size",
                  "temporal_weight", "validation_fraction"}
_RENDERER_KEYS = {"resolution", "erosion_radius", "perceptual", "variant",
                  "train_frames"}
_TOP_KEYS = {"data_root", "sequences", "target", "seed", "holdout_fraction",
             "training", "renderer"}


def _reject_unknown(section: dict, allowed: set, where: str):
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown {where} key(s): {', '.join(sorted(unknown))}")


def load_project_config(path, env=None, require_data: bool = True) -> ProjectConfig:
    """Parse and validate a config file.

    With require_data=True (every command except corpus generation) the data
    root and all referenced sequence directories must already exist.
    """
    env = os.environ if env is None else env
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file does not exist: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}") from e
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    _reject_unknown(raw, _TOP_KEYS, "config")

    data_root = env.get(ENV_DATA_ROOT) or raw.get("data_root")
    if not data_root:
        raise ConfigError(f"{path}: `data_root` is required (or set {ENV_DATA_ROOT})")
    data_root = Path(data_root)
    if not data_root.is_absolute():
        data_root = (path.parent / data_root).resolve()

    training_raw = raw.get("training") or {}
    if not isinstance(training_raw, dict):
        raise ConfigError(f"{path}: `training` must be a mapping")
    _reject_unknown(training_raw, _TRAINING_KEYS, "training")
    try:
        training = TrainingConfig(seed=int(raw.get("seed", 0)), **training_raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: bad training settings: {e}") from e

    renderer_raw = raw.get("renderer") or {}
    if not isinstance(renderer_raw, dict):
        raise ConfigError(f"{path}: `renderer` must be a mapping")
    _reject_unknown(renderer_raw, _RENDERER_KEYS, "renderer")
    renderer = RendererSettings(**renderer_raw)
    if renderer.perceptual not in ("gradient", "none"):
        raise ConfigError(f"{path}: renderer.perceptual must be 'gradient' or 'none'")
    if renderer.variant not in ("dilated", "strided"):
        raise ConfigError(f"{path}: renderer.variant must be 'dilated' or 'strided'")

    sequences = raw.get("sequences") or []
    if not isinstance(sequences, list) or not all(isinstance(s, str) for s in sequences):
        raise ConfigError(f"{path}: `sequences` must be a list of names")
    holdout = float(raw.get("holdout_fraction", 0.25))
    if not (0.0 <= holdout < 1.0):
        raise ConfigError(f"{path}: holdout_fraction must be in [0, 1)")

    cfg = ProjectConfig(
        data_root=data_root,
        sequences=sequences,
        target=raw.get("target"),
        seed=int(raw.get("seed", 0)),
        holdout_fraction=holdout,
        training=training,
        renderer=renderer,
    )
    if require_data:
        if not data_root.is_dir():
            raise ConfigError(f"dataset root does not exist: {data_root}")
        for seq_dir in cfg.sequence_dirs():
            if not seq_dir.is_dir():
                raise ConfigError(f"sequence directory does not exist: {seq_dir}")
        if cfg.target and not cfg.target_dir().is_dir():
            raise ConfigError(f"target directory does not exist: {cfg.target_dir()}")
    return cfg
