"""Pipeline commands: dataset generation, base/control training, controlled
multi-view sampling, the two-stage 3D generation and the pose-conditioning
ablation harness.

Every command is a deterministic function of (config, seed): data streams,
noise draws and optimizers all derive from the run seed. Metrics are written
as JSON lines, one record per step.
"""
from __future__ import annotations

import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from . import distill
from .backbone import MultiViewUNet, load_base_checkpoint, train_base
from .cameras import absolute_canonical_poses, canonical_views, orbit_pose
from .checkpoint import load_checkpoint, save_checkpoint, state_dict_to_tensors, tensors_to_state_dict
from .config import RunConfig
from .control import (
    ControlledDenoiser,
    condition_to_tensor,
    load_control_checkpoint,
    poses_to_tensor,
    save_control_checkpoint,
    train_control,
)
from .data import ConditionImage, DataConfig, batch_stream, edge_map, item_rng, make_scene, next_batch, render_scene, write_dataset
from .diffusion import GuidanceConfig, build_schedule, cfg_combine, ddim_step, ddim_timesteps, predict_x0
from .distill import AnnealRange, GuidanceContext, HybridWeights, anneal_range, sample_timestep
from .surface import (
    DOMAIN_BOUND,
    ExtractedMesh,
    SurfaceModel,
    eikonal_loss,
    export_obj,
    extract_mesh,
    raycast_mesh,
    render_mesh,
    shade_hits,
    volume_render_views,
)
from .tokens import PromptTokens, negative_prompt


class UserError(Exception):
    """An input problem the user can fix (bad path, bad prompt, bad config)."""


class MetricsLogger:
    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._f = open(self.path, "w")

    def log(self, record: dict) -> None:
        self._f.write(json.dumps(record) + "\n")
        self._f.flush()

    def close(self) -> None:
        self._f.close()


def read_metrics(path: str | Path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def stream_window(seed: int, config: DataConfig, num_scenes: int):
    """Deterministic infinite item stream over a finite scene window."""
    index = 0
    while True:
        yield next_batch(item_rng(seed, index % num_scenes), config)
        index += 1


def data_config(config: RunConfig) -> DataConfig:
    d = config.data
    return DataConfig(
        resolution=d.resolution,
        p_2d=d.p_2d,
        p_drop_prompt=d.p_drop_prompt,
        max_primitives=d.max_primitives,
        canny_low=d.canny_low,
        canny_high=d.canny_high,
        canny_sigma=d.canny_sigma,
    )


def generation_cameras(config: RunConfig):
    """Relative canonical views plus the convention world-frame poses used at
    generation time (the condition image is canonical view 0)."""
    s = config.sample
    rel = canonical_views(s.distance, s.elevation_deg, s.azimuth0_deg, s.fov_deg)
    abs_poses = absolute_canonical_poses(s.distance, s.elevation_deg, s.azimuth0_deg, s.fov_deg)
    return rel, abs_poses


def load_condition_image(path: str | Path, resolution: int) -> ConditionImage:
    path = Path(path)
    if not path.exists():
        raise UserError(f"condition image not found: {path}")
    img = Image.open(path).convert("L").resize((resolution, resolution), Image.NEAREST)
    arr = np.asarray(img, dtype=np.float64) / 255.0
    return ConditionImage(data=(arr > 0.5).astype(np.float64)[..., None], kind="edge")


def parse_prompt_text(text: str) -> PromptTokens:
    try:
        return PromptTokens.from_text(text)
    except ValueError as e:
        raise UserError(str(e)) from None


def ddim_sample(denoise_fn, prompt: PromptTokens, shape, schedule, num_steps: int, scale: float, generator: torch.Generator):
    """Deterministic sampler; denoise_fn(z, t, prompt) -> noise prediction.

    The clean-image estimate is clamped to the pixel range each step (the
    noise prediction is re-derived from the clamped estimate), which keeps
    undertrained pixel-space models from drifting out of gamut under strong
    guidance.
    """
    null = PromptTokens.empty()
    z = torch.randn(shape, generator=generator)
    ts = ddim_timesteps(schedule.num_steps, num_steps)
    for t, t_prev in zip(ts, ts[1:] + [0]):
        with torch.no_grad():
            if scale == 0.0:
                eps = denoise_fn(z, t, null)
            else:
                eps_uncond = denoise_fn(z, t, null)
                eps_cond = denoise_fn(z, t, prompt)
                eps = cfg_combine(eps_uncond, eps_cond, scale)
        x0 = predict_x0(z, eps, t, schedule).clamp(-1.0, 1.0)
        ab = schedule.alpha_bar_at(t)
        eps = (z - float(np.sqrt(ab)) * x0) / float(np.sqrt(1.0 - ab))
        z = ddim_step(z, eps, t, t_prev, schedule)
    return z


def sample_views(
    config: RunConfig,
    base: MultiViewUNet,
    controlled: ControlledDenoiser | None,
    prompt: PromptTokens,
    condition: ConditionImage | None,
    seed: int,
    num_steps: int | None = None,
    guidance_scale: float | None = None,
) -> torch.Tensor:
    """Four-view image stack in [0, 1]; controlled when a control model and
    condition are given, otherwise the unconditioned base."""
    cfg = base.cfg
    sched = build_schedule(cfg.num_steps, cfg.beta_min, cfg.beta_max)
    rel, abs_poses = generation_cameras(config)
    rel_t = poses_to_tensor([list(rel.poses)])
    abs_t = poses_to_tensor([list(abs_poses)])
    steps = num_steps or config.sample.num_inference_steps
    scale = config.sample.guidance_scale if guidance_scale is None else guidance_scale

    if controlled is not None:
        if condition is None:
            raise UserError("controlled sampling needs a condition image")
        cond_t = condition_to_tensor(condition)

        def denoise_fn(z, t, p):
            return controlled(z, t, p, cond_t, rel_t, base_poses=abs_t)

    else:

        def denoise_fn(z, t, p):
            cond_v = base.make_conditioning(t, [list(abs_poses)], 1, 4)
            return base.denoise(z, t, p, cond_v)

    generator = torch.Generator().manual_seed(seed)
    shape = (4, cfg.in_channels, cfg.image_size, cfg.image_size)
    x0 = ddim_sample(denoise_fn, prompt, shape, sched, steps, scale, generator)
    return ((x0 + 1.0) / 2.0).clamp(0.0, 1.0).permute(0, 2, 3, 1)


def save_image(array: np.ndarray, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    arr = (np.clip(array, 0.0, 1.0) * 255).round().astype(np.uint8)
    Image.fromarray(arr).save(path)


def image_grid(images: torch.Tensor | np.ndarray) -> np.ndarray:
    """(V, H, W, 3) stack -> one (H, V*W, 3) strip."""
    arr = images.numpy() if isinstance(images, torch.Tensor) else images
    return np.concatenate(list(arr), axis=1)


# ---------------------------------------------------------------------------
# evaluation metrics
# ---------------------------------------------------------------------------

def dilate(mask: np.ndarray, iterations: int = 1) -> np.ndarray:
    from scipy import ndimage

    if iterations <= 0:
        return mask.astype(bool)
    return ndimage.binary_dilation(mask.astype(bool), np.ones((3, 3)), iterations=iterations)


def edge_iou(generated: np.ndarray, condition: ConditionImage, config: DataConfig, tolerance_px: int = 1) -> float:
    """IoU between the generated view's edge map and the condition, with both
    maps dilated by ``tolerance_px`` so single-pixel jitter is not penalized."""
    edges = edge_map(generated, config.canny_low, config.canny_high, config.canny_sigma)
    a = dilate(edges.data[..., 0] > 0.5, tolerance_px)
    b = dilate(condition.data[..., 0] > 0.5, tolerance_px)
    union = (a | b).sum()
    return float((a & b).sum() / union) if union else 0.0


def silhouette_of_image(image: np.ndarray, threshold: float = 0.6) -> np.ndarray:
    """Foreground mask of a white-background render: any-channel darkness."""
    return image.min(axis=-1) < threshold


def silhouette_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = (a | b).sum()
    return float((a & b).sum() / union) if union else 0.0


def cross_view_consistency(images: np.ndarray) -> float:
    """Silhouette-area agreement across the four views (min/max ratio of
    adjacent views; 1.0 means perfectly stable object size)."""
    areas = [max(float(silhouette_of_image(img).mean()), 1e-6) for img in images]
    ratios = [min(areas[i], areas[(i + 1) % 4]) / max(areas[i], areas[(i + 1) % 4]) for i in range(4)]
    return float(np.mean(ratios))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_data(config: RunConfig) -> Path:
    """Materialize the synthetic dataset to disk (streaming needs no files)."""
    out = Path(config.data.path) if config.data.path else Path(config.out_dir) / "dataset"
    write_dataset(out, config.seed, data_config(config), config.data.num_scenes)
    return out


def cmd_train_base(config: RunConfig) -> Path:
    torch.manual_seed(config.seed)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    logger = MetricsLogger(out / "metrics_train_base.jsonl")
    stream = stream_window(config.seed, data_config(config), config.data.num_scenes)
    model, metrics = train_base(stream, config.train_base, config.model, log=logger.log)
    logger.log(metrics[-1])
    logger.close()
    path = config.resolve_path("base")
    save_base_checkpoint(path, model)
    return path


def cmd_train_control(config: RunConfig) -> Path:
    torch.manual_seed(config.seed)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = load_base_checkpoint(config.resolve_path("base"))
    logger = MetricsLogger(out / "metrics_train_control.jsonl")
    stream = stream_window(config.seed + 1, data_config(config), config.data.num_scenes)
    model, metrics = train_control(base, stream, config.train_control, log=logger.log)
    logger.log(metrics[-1])
    logger.close()
    path = config.resolve_path("control")
    save_control_checkpoint(path, model)
    return path


def cmd_sample_mv(
    config: RunConfig,
    prompt_text: str | None = None,
    condition_path: str | None = None,
    seed: int | None = None,
) -> dict:
    """Sample a conditioned 4-view grid; writes the 1x4 grid, per-view files
    and a JSON log of the relative poses used."""
    seed = config.seed if seed is None else seed
    torch.manual_seed(seed)
    prompt = parse_prompt_text(prompt_text or config.sample.prompt)
    cond_path = condition_path or config.sample.condition_path
    if not cond_path:
        raise UserError("sample-mv needs a condition image (--condition or sample.condition_path)")
    base = load_base_checkpoint(config.resolve_path("base"))
    controlled = load_control_checkpoint(config.resolve_path("control"), base)
    condition = load_condition_image(cond_path, base.cfg.image_size)

    images = sample_views(config, base, controlled, prompt, condition, seed)
    out = Path(config.out_dir) / "samples"
    out.mkdir(parents=True, exist_ok=True)
    tag = f"seed{seed}"
    grid_path = out / f"mv_{tag}_grid.png"
    save_image(image_grid(images), grid_path)
    view_paths = []
    for v in range(4):
        p = out / f"mv_{tag}_view{v}.png"
        save_image(images[v].numpy(), p)
        view_paths.append(str(p))
    rel, _ = generation_cameras(config)
    log_path = out / f"mv_{tag}_poses.json"
    with open(log_path, "w") as f:
        json.dump(
            {
                "prompt": prompt.to_text(),
                "condition": str(cond_path),
                "seed": seed,
                "guidance_scale": config.sample.guidance_scale,
                "relative_poses": [p.to_flat() for p in rel.poses],
            },
            f,
            indent=2,
        )
    return {"grid": str(grid_path), "views": view_paths, "poses": str(log_path)}


def _model_space(images_hw3: torch.Tensor, size: int) -> torch.Tensor:
    """(V, H, W, 3) render in [0, 1] -> (V, 3, size, size) in [-1, 1]."""
    x = images_hw3.permute(0, 3, 1, 2) * 2.0 - 1.0
    if x.shape[-1] != size:
        x = F.adaptive_avg_pool2d(x, size)
    return x


def make_guidance_contexts(
    config: RunConfig,
    base: MultiViewUNet,
    controlled: ControlledDenoiser,
    prompt: PromptTokens,
    condition: ConditionImage,
    stage: str,
):
    """2D (base, random view) and 3D (controlled, canonical) contexts."""
    sched = build_schedule(base.cfg.num_steps, base.cfg.beta_min, base.cfg.beta_max)
    rel, abs_poses = generation_cameras(config)
    rel_t = poses_to_tensor([list(rel.poses)])
    abs_t = poses_to_tensor([list(abs_poses)])
    cond_t = condition_to_tensor(condition)
    g = config.gen3d
    scale_2d, scale_3d = (g.cfg_2d, g.cfg_3d) if stage == "coarse" else (g.fine_cfg_2d, g.fine_cfg_3d)

    def denoise_2d(z, t, p):
        cond_v = base.make_conditioning(t, None, 1, 1)
        return base.denoise(z[None], t, p, cond_v)[0]

    def denoise_3d(z, t, p):
        return controlled(z, t, p, cond_t, rel_t, base_poses=abs_t)

    ctx2d = GuidanceContext(
        denoise_fn=denoise_2d,
        prompt=prompt,
        schedule=sched,
        guidance=GuidanceConfig(scale=scale_2d, rescale_factor=0.0),
        negative_prompt=negative_prompt(),
    )
    ctx3d = GuidanceContext(
        denoise_fn=denoise_3d,
        prompt=prompt,
        schedule=sched,
        guidance=GuidanceConfig(scale=scale_3d, rescale_factor=g.rescale_factor),
        negative_prompt=negative_prompt(),
    )
    return ctx2d, ctx3d, abs_poses


def cmd_gen3d_coarse(
    config: RunConfig,
    prompt_text: str | None = None,
    condition_path: str | None = None,
    seed: int | None = None,
    condition: ConditionImage | None = None,
) -> Path:
    """Optimize the SDF scene against the hybrid 2D+3D prior."""
    seed = config.seed if seed is None else seed
    torch.manual_seed(seed)
    prompt = parse_prompt_text(prompt_text or config.sample.prompt)
    base = load_base_checkpoint(config.resolve_path("base"))
    controlled = load_control_checkpoint(config.resolve_path("control"), base)
    if condition is None:
        cond_path = condition_path or config.sample.condition_path
        if not cond_path:
            raise UserError("gen3d-coarse needs a condition image")
        condition = load_condition_image(cond_path, base.cfg.image_size)

    g = config.gen3d
    model = SurfaceModel()
    model.fit_to_ball(seed=seed)
    params = dict(model.named_parameters())
    opt = torch.optim.AdamW(model.parameters(), lr=g.coarse_lr, weight_decay=g.weight_decay)
    ctx2d, ctx3d, abs_poses = make_guidance_contexts(config, base, controlled, prompt, condition, "coarse")
    weights = HybridWeights(lambda_2d=g.lambda_2d, lambda_3d=g.lambda_3d)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    sched = ctx2d.schedule
    out = Path(config.out_dir)
    logger = MetricsLogger(out / "metrics_gen3d_coarse.jsonl")

    t_start = time.time()
    for step in range(g.coarse_steps):
        res = g.coarse_resolution if step >= g.resolution_switch_step else g.coarse_resolution_start
        window = anneal_range(step, g.coarse_steps)
        rand_pose = orbit_pose(
            rng.uniform(1.4, 1.6), rng.uniform(0.0, 30.0), rng.uniform(0.0, 360.0), rng.uniform(40.0, 60.0)
        )
        render = volume_render_views(model, list(abs_poses) + [rand_pose], res, n_samples=g.n_samples, generator=gen)
        x_all = _model_space(render["rgb"], base.cfg.image_size)
        x_star, x_rand = x_all[:4], x_all[4:]

        t2 = sample_timestep(rng, window, sched.num_steps)
        eps2 = torch.randn(x_rand[0].shape, generator=gen)
        grad2 = distill.sds_gradient(ctx2d, x_rand[0], t2, eps2)
        loss2d = distill.surrogate_loss(x_rand[0], grad2)
        g2d = distill.param_gradients(loss2d, params, retain_graph=True)

        if weights.lambda_3d > 0:
            t3 = sample_timestep(rng, window, sched.num_steps)
            eps3 = torch.randn(x_star.shape, generator=gen)
            grad3 = distill.x0_recon_gradient(ctx3d, x_star, t3, eps3)
            loss3d = distill.surrogate_loss(x_star, grad3)
            g3d = distill.param_gradients(loss3d, params, retain_graph=True)
        else:
            t3, loss3d, g3d = 0, torch.tensor(0.0), {}

        opt.zero_grad()
        distill.hybrid_step(weights, g2d, g3d, params)
        pts = (torch.rand(g.eikonal_points, 3, generator=gen) * 2.0 - 1.0) * DOMAIN_BOUND
        eik = eikonal_loss(model.sdf, pts)
        (g.eikonal_weight * eik).backward()
        if not (torch.isfinite(loss2d) and torch.isfinite(loss3d) and torch.isfinite(eik)):
            logger.close()
            raise RuntimeError(
                f"non-finite loss at step {step}: loss2d={float(loss2d)}, loss3d={float(loss3d)}, eikonal={float(eik)}"
            )
        opt.step()

        logger.log(
            {
                "step": step,
                "loss_2d": float(loss2d.detach()),
                "loss_3d": float(loss3d.detach()),
                "eikonal": float(eik.detach()),
                "t_2d": t2,
                "t_3d": t3,
                "t_range": [window.t_min_frac, window.t_max_frac],
                "resolution": res,
                "no_3d_prior": weights.lambda_3d == 0,
                "sharpness": float(model.sharpness.detach()),
                "elapsed_s": time.time() - t_start,
            }
        )
    logger.close()

    path = config.resolve_path("surface")
    save_checkpoint(
        path,
        {**state_dict_to_tensors(model.state_dict()), "condition": condition.data},
        meta={
            "kind": "surface",
            "field_config": model.cfg.to_dict(),
            "prompt": prompt.to_text(),
            "condition_kind": condition.kind,
            "seed": seed,
        },
    )
    return path


def _load_surface_with_context(config: RunConfig):
    path = config.resolve_path("surface")
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "surface":
        raise UserError(f"{path}: not a surface checkpoint")
    from .surface import FieldConfig

    model = SurfaceModel(FieldConfig(**meta["field_config"]))
    condition = ConditionImage(data=tensors.pop("condition"), kind=meta.get("condition_kind", "edge"))
    model.load_state_dict(tensors_to_state_dict(tensors))
    prompt = PromptTokens.from_text(meta["prompt"]) if meta.get("prompt") else PromptTokens.empty()
    return model, condition, prompt, meta


def cmd_gen3d_fine(config: RunConfig, seed: int | None = None) -> dict:
    """Fix the extracted geometry and refine the texture field."""
    seed = config.seed if seed is None else seed
    torch.manual_seed(seed)
    g = config.gen3d
    base = load_base_checkpoint(config.resolve_path("base"))
    controlled = load_control_checkpoint(config.resolve_path("control"), base)
    model, condition, prompt, _ = _load_surface_with_context(config)

    try:
        mesh = extract_mesh(model, g.mesh_grid)
    except ValueError as e:
        raise UserError(f"{e}; the coarse stage produced no surface, rerun gen3d-coarse") from None
    hash_before = mesh.geometry_hash()

    # freeze everything but the color head
    for name, p in model.named_parameters():
        p.requires_grad_(name.startswith("color"))
    color_params = {n: p for n, p in model.named_parameters() if p.requires_grad}
    opt = torch.optim.AdamW(color_params.values(), lr=g.fine_lr, weight_decay=g.weight_decay)
    ctx2d, ctx3d, abs_poses = make_guidance_contexts(config, base, controlled, prompt, condition, "fine")
    weights = HybridWeights(lambda_2d=g.lambda_2d, lambda_3d=g.lambda_3d)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    sched = ctx2d.schedule

    canonical_casts = [raycast_mesh(mesh, p, g.fine_resolution) for p in abs_poses]
    pool_poses = [
        orbit_pose(rng.uniform(1.4, 1.6), rng.uniform(0.0, 30.0), rng.uniform(0.0, 360.0), rng.uniform(40.0, 60.0))
        for _ in range(g.random_view_pool)
    ]
    pool_casts: dict[int, dict] = {}

    out = Path(config.out_dir)
    logger = MetricsLogger(out / "metrics_gen3d_fine.jsonl")
    window = AnnealRange(t_max_frac=distill.ANNEAL_END[0], t_min_frac=distill.ANNEAL_END[1])
    t_start = time.time()
    for step in range(g.fine_steps):
        pick = int(rng.integers(0, len(pool_poses)))
        if pick not in pool_casts:
            pool_casts[pick] = raycast_mesh(mesh, pool_poses[pick], g.fine_resolution)
        rand_rgb = shade_hits(pool_casts[pick], model.color)
        canon_rgb = torch.stack([shade_hits(c, model.color) for c in canonical_casts])
        x_rand = _model_space(rand_rgb[None], base.cfg.image_size)[0]
        x_star = _model_space(canon_rgb, base.cfg.image_size)

        t2 = sample_timestep(rng, window, sched.num_steps)
        eps2 = torch.randn(x_rand.shape, generator=gen)
        grad2 = distill.nfsd_gradient(ctx2d, x_rand, t2, eps2, t_switch=g.nfsd_t_switch)
        loss2d = distill.surrogate_loss(x_rand, grad2)
        g2d = distill.param_gradients(loss2d, color_params, retain_graph=True)

        t3 = sample_timestep(rng, window, sched.num_steps)
        eps3 = torch.randn(x_star.shape, generator=gen)
        grad3 = distill.x0_recon_gradient(ctx3d, x_star, t3, eps3)
        loss3d = distill.surrogate_loss(x_star, grad3)
        g3d = distill.param_gradients(loss3d, color_params)

        opt.zero_grad()
        distill.hybrid_step(weights, g2d, g3d, color_params)
        texture_loss = float((weights.lambda_2d * loss2d + weights.lambda_3d * loss3d).detach())
        if not np.isfinite(texture_loss):
            logger.close()
            raise RuntimeError(f"non-finite texture loss at step {step}")
        opt.step()
        logger.log(
            {
                "step": step,
                "texture_loss": texture_loss,
                "loss_2d": float(loss2d.detach()),
                "loss_3d": float(loss3d.detach()),
                "t_2d": t2,
                "t_3d": t3,
                "elapsed_s": time.time() - t_start,
            }
        )
    logger.close()

    with torch.no_grad():
        mesh.vertex_colors = model.color(torch.from_numpy(mesh.vertices).float()).numpy()
    hash_after = mesh.geometry_hash()
    obj_path = out / "mesh.obj"
    export_obj(mesh, obj_path)

    strip = []
    with torch.no_grad():
        for k in range(g.turntable_views):
            pose = orbit_pose(config.sample.distance, config.sample.elevation_deg, 360.0 * k / g.turntable_views, config.sample.fov_deg)
            strip.append(render_mesh(mesh, model.color, pose, g.fine_resolution).numpy())
    strip_path = out / "turntable.png"
    save_image(np.concatenate(strip, axis=1), strip_path)

    report = {
        "mesh": str(obj_path),
        "turntable": str(strip_path),
        "geometry_hash_before": hash_before,
        "geometry_hash_after": hash_after,
        "geometry_frozen": hash_before == hash_after,
        "metrics": str(out / "metrics_gen3d_fine.jsonl"),
    }
    with open(out / "gen3d_fine_report.json", "w") as f:
        json.dump(report, f, indent=2)
    return report


def dataset_fingerprint(seed: int, config: DataConfig, items: int = 8) -> str:
    import hashlib

    digest = hashlib.sha256()
    for i in range(items):
        item = next_batch(item_rng(seed, i), config)
        digest.update(item.images.tobytes())
        digest.update(item.condition.data.tobytes())
    return digest.hexdigest()


def cmd_ablate_pose(config: RunConfig, seed: int | None = None) -> dict:
    """Train and compare the three pose-conditioning variants on shared data."""
    seed = config.seed if seed is None else seed
    base = load_base_checkpoint(config.resolve_path("base"))
    dcfg = data_config(config)
    control_seed = seed + 1
    fingerprint = dataset_fingerprint(control_seed, dcfg)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    report: dict = {"variants": {}, "seed": seed}
    for variant in ("abs_t", "rel_t", "rel_t_m2"):
        torch.manual_seed(seed)
        stream = stream_window(control_seed, dcfg, config.data.num_scenes)
        train_cfg = replace(config.train_control, steps=config.ablation.steps, variant=variant)
        model, metrics = train_control(base, stream, train_cfg)

        ious, consistencies = [], []
        for i in range(config.ablation.eval_scenes):
            scene = make_scene(item_rng(seed + 7, i))
            _, abs_poses = generation_cameras(config)
            view0 = render_scene(scene, abs_poses[0], base.cfg.image_size)
            condition = edge_map(view0, dcfg.canny_low, dcfg.canny_high, dcfg.canny_sigma)
            images = sample_views(
                config, base, model, scene.prompt, condition, seed + i, num_steps=config.ablation.sample_steps
            ).numpy()
            ious.append(edge_iou(images[0], condition, dcfg))
            consistencies.append(cross_view_consistency(images))
        report["variants"][variant] = {
            "edge_iou_view0": float(np.mean(ious)),
            "cross_view_consistency": float(np.mean(consistencies)),
            "final_loss": metrics[-2]["loss"] if len(metrics) > 1 else None,
            "dataset_fingerprint": fingerprint,
        }

    ordering = sorted(report["variants"], key=lambda v: -report["variants"][v]["edge_iou_view0"])
    report["edge_iou_ordering"] = ordering
    report["full_module_best"] = ordering[0] == "rel_t_m2"
    with open(out / "ablation_report.json", "w") as f:
        json.dump(report, f, indent=2)
    lines = ["| variant | edge IoU (view 0) | cross-view consistency |", "|---|---|---|"]
    for v, r in report["variants"].items():
        lines.append(f"| {v} | {r['edge_iou_view0']:.4f} | {r['cross_view_consistency']:.4f} |")
    (out / "ablation_report.md").write_text("\n".join(lines) + "\n")
    return report
