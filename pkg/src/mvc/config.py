"""Hierarchical run configuration: YAML files + dotted-key overrides.

Every field has a default (documented in the dataclasses below); unknown
keys are rejected so typos fail loudly instead of silently running with
defaults.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from .backbone import ModelConfig, TrainBaseConfig
from .control import TrainControlConfig
from .data import DataConfig


@dataclass(frozen=True)
class DataSection(DataConfig):
    path: str = ""  # optional on-disk dataset directory ("" = streaming)
    num_scenes: int = 5000  # streaming window; items repeat past this index


@dataclass(frozen=True)
class SampleConfig:
    num_inference_steps: int = 50
    guidance_scale: float = 7.5
    # generation-time canonical camera convention (condition view = view 0)
    distance: float = 1.5
    elevation_deg: float = 15.0
    azimuth0_deg: float = 0.0
    fov_deg: float = 50.0
    prompt: str = "large red sphere"
    condition_path: str = ""


@dataclass(frozen=True)
class Gen3dConfig:
    # coarse stage
    coarse_steps: int = 1500
    coarse_resolution: int = 64
    coarse_resolution_start: int = 32
    resolution_switch_step: int = 1200
    n_samples: int = 64
    coarse_lr: float = 5e-3
    weight_decay: float = 1e-6
    eikonal_weight: float = 0.1
    eikonal_points: int = 512
    cfg_2d: float = 10.0
    cfg_3d: float = 50.0
    rescale_factor: float = 0.5
    lambda_2d: float = 1.0
    lambda_3d: float = 0.1
    color_weight_threshold: float = 0.0
    # fine stage
    fine_steps: int = 800
    fine_resolution: int = 128
    mesh_grid: int = 64
    fine_lr: float = 1e-2
    fine_cfg_2d: float = 7.5
    fine_cfg_3d: float = 10.0
    nfsd_t_switch: int = 200
    random_view_pool: int = 64
    turntable_views: int = 8


@dataclass(frozen=True)
class AblationConfig:
    steps: int = 600
    eval_scenes: int = 6
    sample_steps: int = 50


@dataclass(frozen=True)
class PathsConfig:
    base_checkpoint: str = ""  # defaults to <out_dir>/base.ckpt
    control_checkpoint: str = ""  # defaults to <out_dir>/control.ckpt
    surface_checkpoint: str = ""  # defaults to <out_dir>/surface.ckpt


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataSection = field(default_factory=DataSection)
    train_base: TrainBaseConfig = field(default_factory=TrainBaseConfig)
    train_control: TrainControlConfig = field(default_factory=TrainControlConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    gen3d: Gen3dConfig = field(default_factory=Gen3dConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def resolve_path(self, name: str) -> Path:
        explicit = getattr(self.paths, f"{name}_checkpoint")
        return Path(explicit) if explicit else Path(self.out_dir) / f"{name}.ckpt"


def _coerce(cls, value, where: str):
    if is_dataclass(cls) and isinstance(value, dict):
        return _build(cls, value, where)
    origin = getattr(cls, "__origin__", None)
    if origin is tuple or cls is tuple:
        return tuple(value)
    # YAML reads "1e-3" as a string; honor the declared field type
    if cls is float and isinstance(value, (int, str)):
        return float(value)
    if cls is int and isinstance(value, str):
        return int(value)
    return value


def _build(cls, data: dict, where: str = ""):
    import typing

    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown config keys {sorted(unknown)} under '{where or 'top level'}'")
    hints = typing.get_type_hints(cls)
    kwargs = {
        name: _coerce(hints[name], value, f"{where}.{name}".lstrip("."))
        for name, value in data.items()
    }
    return cls(**kwargs)


def config_to_dict(config: RunConfig) -> dict:
    return asdict(config)


def load_config(path: str | Path | None = None, overrides: list[str] | None = None, seed: int | None = None) -> RunConfig:
    """Build a RunConfig from an optional YAML file plus key=value overrides.

    Override values are parsed as YAML scalars, so ``--override
    gen3d.lambda_3d=0.2`` and ``--override sample.prompt='large red sphere'``
    both do the right thing.
    """
    data: dict = {}
    if path:
        with open(path) as f:
            data = yaml.safe_load(f) or {}
        if not isinstance(data, dict):
            raise ValueError(f"{path}: config root must be a mapping")
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"override '{item}' must look like key=value")
        key, _, raw = item.partition("=")
        node = data
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ValueError(f"override '{key}' conflicts with a non-mapping value")
        node[parts[-1]] = yaml.safe_load(raw)
    if seed is not None:
        data["seed"] = seed
    return _build(RunConfig, data)
