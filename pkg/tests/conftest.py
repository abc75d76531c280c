"""Shared micro-scale fixtures: a tiny trained base + control pair that the
pipeline and acceptance-adjacent tests reuse. Training runs once per session.
"""
import numpy as np
import pytest
import torch

from mvc.backbone import ModelConfig, save_base_checkpoint, train_base
from mvc.config import load_config
from mvc.control import save_control_checkpoint, train_control
from mvc.data import DataConfig
from mvc.pipeline import stream_window

MICRO_MODEL = dict(
    image_size=16,
    base_width=16,
    channel_mults=[1, 2],
    emb_dim=32,
    attn_resolutions=[8],
    num_heads=2,
    num_steps=100,
)


def micro_overrides(out_dir):
    return [
        f"out_dir={out_dir}",
        "data.resolution=16",
        "data.num_scenes=64",
        "train_base.steps=120",
        "train_base.heldout_items=2",
        "train_control.steps=80",
        "train_control.lr=1e-3",
        "train_control.heldout_items=2",
        "sample.num_inference_steps=10",
        "gen3d.coarse_steps=16",
        "gen3d.coarse_resolution=16",
        "gen3d.coarse_resolution_start=8",
        "gen3d.resolution_switch_step=10",
        "gen3d.n_samples=24",
        "gen3d.eikonal_points=128",
        "gen3d.fine_steps=8",
        "gen3d.fine_resolution=32",
        "gen3d.mesh_grid=16",
        "gen3d.random_view_pool=3",
        "gen3d.turntable_views=2",
        "ablation.steps=30",
        "ablation.eval_scenes=2",
        "ablation.sample_steps=8",
    ] + [f"model.{k}={v}" for k, v in MICRO_MODEL.items()]


@pytest.fixture(scope="session")
def micro_run(tmp_path_factory):
    """Config + trained base/control checkpoints at micro scale."""
    out = tmp_path_factory.mktemp("micro_run")
    config = load_config(overrides=micro_overrides(out))

    torch.manual_seed(config.seed)
    stream = stream_window(config.seed, DataConfig(resolution=16), config.data.num_scenes)
    base, _ = train_base(stream, config.train_base, config.model)
    save_base_checkpoint(config.resolve_path("base"), base)

    torch.manual_seed(config.seed)
    stream = stream_window(config.seed + 1, DataConfig(resolution=16), config.data.num_scenes)
    controlled, _ = train_control(base, stream, config.train_control)
    save_control_checkpoint(config.resolve_path("control"), controlled)
    return config
