"""Run configuration: one JSON document with optional dotted-key overrides.

Schema (every key optional; defaults shown)::

    {
      "paths": {"scene_dir": null, "out_dir": null},
      "association": {"mode": "accumulated", "reject_above": 0.7,
                      "min_mask_pixels": 16, "gamma_assoc": 0.1,
                      "pointmap_fusion": true},
      "training": {"iterations": 2000, "lambda_plane": 10.0, "lambda_2d": 1.0,
                   "lambda_3d": 1.0, "lambda_dssim": 0.2, "k_neighbors": 10,
                   "plane_interval": 1000, "plane_regularization": true,
                   "split_projection": true, "densify_interval": 500,
                   "densify_from": 500, "densify_until": 1500,
                   "grad_threshold": 0.0002, "scale_threshold": null,
                   "opacity_floor": 0.005, "voxel_size": 0.05, "seed": 0},
      "eval": {"gamma": 0.5}
    }

``pointmap_fusion: false`` keeps each frame's own mask IDs and
``plane_regularization: false`` forces the plane weight to zero.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from segfield.errors import InvalidInputError
from segfield.train import TrainConfig


@dataclass
class PathsConfig:
    scene_dir: str | None = None
    out_dir: str | None = None


@dataclass
class AssociationConfig:
    mode: str = "accumulated"
    reject_above: float = 0.7
    min_mask_pixels: int = 16
    gamma_assoc: float = 0.1
    pointmap_fusion: bool = True


@dataclass
class TrainingConfig:
    iterations: int = 2000
    lambda_plane: float = 10.0
    lambda_2d: float = 1.0
    lambda_3d: float = 1.0
    lambda_dssim: float = 0.2
    k_neighbors: int = 10
    plane_interval: int = 1000
    plane_regularization: bool = True
    split_projection: bool = True
    densify_interval: int = 500
    densify_from: int = 500
    densify_until: int = 1500
    grad_threshold: float = 2e-4
    scale_threshold: float | None = None
    opacity_floor: float = 0.005
    voxel_size: float | None = 0.05
    seed: int = 0

    def to_train_config(self) -> TrainConfig:
        return TrainConfig(
            iterations=self.iterations,
            lambda_plane=self.lambda_plane if self.plane_regularization else 0.0,
            lambda_2d=self.lambda_2d,
            lambda_3d=self.lambda_3d,
            lambda_dssim=self.lambda_dssim,
            k_neighbors=self.k_neighbors,
            plane_interval=self.plane_interval,
            split_projection=self.split_projection,
            densify_interval=self.densify_interval,
            densify_from=self.densify_from,
            densify_until=self.densify_until,
            grad_threshold=self.grad_threshold,
            scale_threshold=self.scale_threshold,
            opacity_floor=self.opacity_floor,
            seed=self.seed,
        )


@dataclass
class EvalConfig:
    gamma: float = 0.5


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    association: AssociationConfig = field(default_factory=AssociationConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        """Raise :class:`InvalidInputError` on the first invalid value."""
        a, t, e = self.association, self.training, self.eval
        if a.mode not in ("accumulated", "adjacent"):
            raise InvalidInputError(f"association.mode must be 'accumulated' or 'adjacent', got {a.mode!r}")
        if not 0 <= a.reject_above <= 1:
            raise InvalidInputError("association.reject_above must lie in [0, 1]")
        if a.min_mask_pixels < 0:
            raise InvalidInputError("association.min_mask_pixels must be non-negative")
        if a.gamma_assoc <= 0:
            raise InvalidInputError("association.gamma_assoc must be positive")
        if t.iterations < 0:
            raise InvalidInputError("training.iterations must be non-negative")
        for name in ("lambda_plane", "lambda_2d", "lambda_3d", "lambda_dssim", "grad_threshold", "opacity_floor"):
            if getattr(t, name) < 0:
                raise InvalidInputError(f"training.{name} must be non-negative")
        if t.lambda_dssim > 1:
            raise InvalidInputError("training.lambda_dssim must lie in [0, 1]")
        for name in ("plane_interval", "densify_interval"):
            if getattr(t, name) < 1:
                raise InvalidInputError(f"training.{name} must be at least 1")
        if t.k_neighbors < 3:
            raise InvalidInputError("training.k_neighbors must be at least 3")
        if t.voxel_size is not None and t.voxel_size <= 0:
            raise InvalidInputError("training.voxel_size must be positive or null")
        if t.scale_threshold is not None and t.scale_threshold <= 0:
            raise InvalidInputError("training.scale_threshold must be positive or null")
        if e.gamma <= 0:
            raise InvalidInputError("eval.gamma must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {"paths": PathsConfig, "association": AssociationConfig, "training": TrainingConfig, "eval": EvalConfig}


def _coerce(section: str, name: str, value):
    kind = {f.name: f.type for f in fields(_SECTIONS[section])}[name]
    if value is None:
        if "None" in str(kind):
            return None
        raise InvalidInputError(f"{section}.{name} may not be null")
    if "bool" in str(kind):
        if not isinstance(value, bool):
            raise InvalidInputError(f"{section}.{name} must be a boolean")
        return value
    if "int" in str(kind):
        if isinstance(value, bool) or not isinstance(value, int):
            raise InvalidInputError(f"{section}.{name} must be an integer")
        return value
    if "float" in str(kind):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InvalidInputError(f"{section}.{name} must be a number")
        return float(value)
    if not isinstance(value, str):
        raise InvalidInputError(f"{section}.{name} must be a string")
    return value


def from_dict(data: dict) -> RunConfig:
    """Build and validate a config; unknown sections or keys are errors."""
    if not isinstance(data, dict):
        raise InvalidInputError("config must be a JSON object")
    cfg = RunConfig()
    for section, values in data.items():
        if section not in _SECTIONS:
            raise InvalidInputError(f"unknown config section {section!r}")
        if not isinstance(values, dict):
            raise InvalidInputError(f"config section {section!r} must be an object")
        target = getattr(cfg, section)
        for name, value in values.items():
            if not hasattr(target, name):
                raise InvalidInputError(f"unknown config key {section}.{name}")
            setattr(target, name, _coerce(section, name, value))
    cfg.validate()
    return cfg


def load(path=None, overrides: list[str] | None = None) -> RunConfig:
    """Read a JSON config (or start from defaults) and apply ``section.key=value`` overrides.

    Override values are parsed as JSON when possible, else taken as strings.
    """
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise InvalidInputError(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"config file {p} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise InvalidInputError("config must be a JSON object")
    for item in overrides or []:
        key, sep, raw = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise InvalidInputError(f"override {item!r} must look like section.key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        data.setdefault(section, {})
        if not isinstance(data[section], dict):
            raise InvalidInputError(f"config section {section!r} must be an object")
        data[section][name] = value
    return from_dict(data)
