"""The trainable control side: a conditioning module that turns an edge/depth
map, relative camera poses and the timestep into local and global control
embeddings, plus a copy of the base encoder whose block outputs feed the
frozen base decoder through zero-initialized 1x1 convolutions.

At initialization every zero connection emits exact zeros, so the controlled
model reproduces the frozen base until training moves the connections.
"""
from __future__ import annotations

import copy
import time
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint as ckpt
from .backbone import ModelConfig, MultiViewUNet, prepare_item, zero_module
from .cameras import CameraPose
from .data import ConditionImage
from .diffusion import build_schedule, diffusion_loss
from .tokens import PromptTokens

VARIANTS = ("abs_t", "rel_t", "rel_t_m2")


@dataclass
class ControlEmbeddings:
    """Local per-view spatial residuals and global per-view vectors."""

    local: torch.Tensor  # (B, V, C, H, W), matches the latent shape
    global_: torch.Tensor  # (B, V, E)


def poses_to_tensor(poses: list[list[CameraPose]]) -> torch.Tensor:
    return torch.tensor([[p.to_flat() for p in scene] for scene in poses], dtype=torch.float32)


def condition_to_tensor(condition: ConditionImage) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(condition.data)).float().permute(2, 0, 1)[None]


class ConditionEncoder(nn.Module):
    """Four convolutions taking the condition image to the latent resolution."""

    def __init__(self, cfg: ModelConfig, width: int, latent_size: int | None = None):
        super().__init__()
        latent_size = latent_size or cfg.image_size  # pixel-space: no downsampling
        factor = cfg.image_size // latent_size
        strides = [2 if factor >= 2**k else 1 for k in range(1, 5)][::-1]
        chans = [max(width // 4, 8), max(width // 2, 8), width, width]
        layers = []
        in_ch = 1
        for ch, stride in zip(chans, strides):
            layers.append(nn.Conv2d(in_ch, ch, 3, stride=stride, padding=1))
            in_ch = ch
        self.convs = nn.ModuleList(layers)

    def forward(self, c: torch.Tensor) -> torch.Tensor:
        h = c
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < len(self.convs) - 1:
                h = F.silu(h)
        return h


class ConditioningModule(nn.Module):
    """Produces the local/global control embeddings.

    Per view k: psi_k = psi + M1(t_emb + camera_emb(rel_pose_k)); the local
    embedding is a convolution of psi_k down to the latent channel count and
    the global embedding is M2 of its spatial average. M1 is zero-initialized
    so at init both embeddings are view-independent; M2 is live from step 0
    because it must stand in for the base camera embedding immediately.
    """

    def __init__(self, cfg: ModelConfig, base_camera_mlp: nn.Module):
        super().__init__()
        width = cfg.base_width
        e = cfg.emb_dim
        self.encoder = ConditionEncoder(cfg, width)
        # the copy trains even when the source model is already frozen
        self.camera_mlp = copy.deepcopy(base_camera_mlp).requires_grad_(True)
        self.m1 = nn.Sequential(nn.Linear(e, e), nn.SiLU(), zero_module(nn.Linear(e, width)))
        self.conv_out = nn.Conv2d(width, cfg.in_channels, 3, padding=1)
        self.m2 = nn.Sequential(nn.Linear(width, e), nn.SiLU(), nn.Linear(e, e))

    def encode_condition(self, c: torch.Tensor) -> torch.Tensor:
        return self.encoder(c)

    def forward(
        self,
        c: torch.Tensor,
        rel_poses: torch.Tensor | None,
        t_emb: torch.Tensor,
        views: int,
    ) -> ControlEmbeddings:
        """c: (B, 1, H, W); rel_poses: (B, V, 16) or None (no-pose variant);
        t_emb: (B, E)."""
        if views not in (1, 4):
            raise ValueError(f"conditioning module takes 1 or 4 views, got {views}")
        if rel_poses is not None:
            if rel_poses.shape[1] != views:
                raise ValueError(f"expected {views} poses, got {rel_poses.shape[1]}")
            identity = torch.eye(4).reshape(-1)
            if not torch.allclose(rel_poses[:, 0], identity, atol=1e-5):
                raise ValueError("view 0 must be the identity (poses must be relative to the condition view)")
        b = c.shape[0]
        psi = self.encoder(c)  # (B, P, h, w)
        if rel_poses is None:
            e_tv = t_emb[:, None, :].expand(b, views, -1)
        else:
            e_tv = t_emb[:, None, :] + self.camera_mlp(rel_poses)
        psi_tv = psi[:, None] + self.m1(e_tv)[..., None, None]  # (B, V, P, h, w)
        flat = psi_tv.reshape(b * views, *psi_tv.shape[2:])
        local = self.conv_out(flat).reshape(b, views, -1, *psi.shape[-2:])
        global_ = self.m2(psi_tv.mean(dim=(-2, -1)))
        return ControlEmbeddings(local=local, global_=global_)


class ControlBranch(nn.Module):
    """Conditioning module + trainable encoder copy + zero connections."""

    def __init__(self, base: MultiViewUNet):
        super().__init__()
        self.cfg = base.cfg
        self.conditioning = ConditioningModule(base.cfg, base.camera_mlp)
        self.encoder = copy.deepcopy(base.encoder).requires_grad_(True)
        self.zero_convs = nn.ModuleList(
            [zero_module(nn.Conv2d(ch, ch, 1)) for ch in self.encoder.skip_channels]
            + [zero_module(nn.Conv2d(self.encoder.out_channels, self.encoder.out_channels, 1))]
        )

    def forward(self, z: torch.Tensor, local: torch.Tensor, emb: torch.Tensor) -> list[torch.Tensor]:
        """Residual tensors, one per encoder skip plus the mid block."""
        b, v, c, h, w = z.shape
        x = (z + local).reshape(b * v, c, h, w)
        hidden, skips = self.encoder(x, emb.reshape(b * v, -1), views=v)
        outs = [conv(s) for conv, s in zip(self.zero_convs[:-1], skips)]
        outs.append(self.zero_convs[-1](hidden))
        return outs


class ControlledDenoiser(nn.Module):
    """Frozen base + control branch with the conditioning-variant switches.

    Variants: ``rel_t_m2`` (full: the global embedding replaces the base
    camera embedding), ``rel_t`` (no global embedding; the base keeps its own
    camera path), ``abs_t`` (additionally the conditioning module receives no
    pose input).
    """

    def __init__(self, base: MultiViewUNet, control: ControlBranch | None = None, variant: str = "rel_t_m2"):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
        self.base = base
        self.base.requires_grad_(False)
        self.control = control if control is not None else ControlBranch(base)
        self.variant = variant

    def forward(
        self,
        z: torch.Tensor,
        t,
        prompt,
        condition: torch.Tensor,
        rel_poses: torch.Tensor,
        base_poses: torch.Tensor | None = None,
        use_control: bool = True,
        use_global: bool | None = None,
    ) -> torch.Tensor:
        """z: (B, V, C, H, W); condition: (B, 1, H, W); rel_poses: (B, V, 16).

        ``base_poses`` are world-frame cameras for the variants that keep the
        base camera path (and for the e^g bypass); they default to the
        relative poses when omitted. ``use_global=False`` bypasses the e^g
        substitution (the zero-init identity switch).
        """
        squeeze = z.ndim == 4
        if squeeze:
            z = z[None]
        if rel_poses is not None and rel_poses.ndim == 2:
            rel_poses = rel_poses[None]
        if base_poses is not None and base_poses.ndim == 2:
            base_poses = base_poses[None]
        if condition.ndim == 3:
            condition = condition[None]
        b, v = z.shape[:2]
        if use_global is None:
            use_global = self.variant == "rel_t_m2"

        t_emb = self.base.embed_timestep(t)
        if t_emb.shape[0] == 1 and b > 1:
            t_emb = t_emb.expand(b, -1)
        prompts = [prompt] * b if isinstance(prompt, PromptTokens) else list(prompt)
        p_emb = self.base.embed_prompt(prompts)

        module_poses = None if self.variant == "abs_t" else rel_poses
        emb_cond = self.control.conditioning(condition, module_poses, t_emb, views=v)

        if use_global:
            view_emb = emb_cond.global_
        else:
            fallback = base_poses if base_poses is not None else rel_poses
            view_emb = self.base.camera_mlp(fallback)
        emb = (t_emb + p_emb)[:, None, :] + view_emb

        residuals = None
        if use_control:
            residuals = self.control(z, emb_cond.local, emb)
        out = self.base(z, emb, residuals=residuals)
        return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainControlConfig:
    steps: int = 3000
    batch_scenes: int = 2
    lr: float = 4e-5
    weight_decay: float = 1e-4
    seed: int = 1
    heldout_items: int = 8
    log_every: int = 50
    variant: str = "rel_t_m2"


def identity_rel_poses(item) -> torch.Tensor:
    return poses_to_tensor([list(item.rel_poses)])


def _control_step_loss(model: ControlledDenoiser, items, sched, rng) -> torch.Tensor:
    losses = []
    for item in items:
        _, t, eps, z_t = prepare_item(item, sched, rng, model.base.cfg)
        cond = condition_to_tensor(item.condition)
        rel = identity_rel_poses(item)
        base_poses = poses_to_tensor([list(item.abs_poses)])
        eps_hat = model(z_t[None], t, item.prompt, cond, rel, base_poses=base_poses)
        losses.append(diffusion_loss(eps_hat[0], eps))
    return torch.stack(losses).mean()


def train_control(base: MultiViewUNet, dataset, config: TrainControlConfig, log=None):
    """Train only the control branch against a frozen base.

    Returns (controlled model, metrics). The metrics carry instrumentation
    for the 2D/3D mix and prompt-drop fractions actually seen.
    """
    torch.manual_seed(config.seed)
    model = ControlledDenoiser(base, variant=config.variant)
    base_state_before = hash_state_dict(base)
    sched = build_schedule(base.cfg.num_steps, base.cfg.beta_min, base.cfg.beta_max)
    opt = torch.optim.AdamW(model.control.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)

    data_iter = iter(dataset)
    try:
        heldout = [next(data_iter) for _ in range(config.heldout_items)]
        first = next(data_iter)
    except StopIteration:
        raise ValueError("dataset is empty or smaller than the held-out split") from None

    def data_items(n):
        nonlocal first
        items = []
        for _ in range(n):
            if first is not None:
                items.append(first)
                first = None
            else:
                items.append(next(data_iter))
        return items

    def heldout_loss() -> float:
        eval_rng = np.random.default_rng(12345)
        with torch.no_grad():
            return float(_control_step_loss(model, heldout, sched, eval_rng)) if heldout else 0.0

    metrics = []
    initial_heldout = heldout_loss()
    counts = {"items": 0, "is_3d": 0, "empty_prompt": 0}
    t_start = time.time()
    for step in range(config.steps):
        items = data_items(config.batch_scenes)
        counts["items"] += len(items)
        counts["is_3d"] += sum(not item.is_2d for item in items)
        counts["empty_prompt"] += sum(item.prompt.is_empty for item in items)
        loss = _control_step_loss(model, items, sched, rng)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % config.log_every == 0 or step == config.steps - 1:
            rec = {
                "step": step,
                "loss": float(loss.detach()),
                "fraction_3d": counts["is_3d"] / max(counts["items"], 1),
                "empty_prompt_fraction": counts["empty_prompt"] / max(counts["items"], 1),
                "elapsed_s": time.time() - t_start,
            }
            metrics.append(rec)
            if log:
                log(rec)
    metrics.append(
        {
            "step": config.steps,
            "heldout_initial": initial_heldout,
            "heldout_final": heldout_loss(),
            "fraction_3d": counts["is_3d"] / max(counts["items"], 1),
            "empty_prompt_fraction": counts["empty_prompt"] / max(counts["items"], 1),
            "base_unchanged": hash_state_dict(base) == base_state_before,
            "elapsed_s": time.time() - t_start,
        }
    )
    return model, metrics


def hash_state_dict(model: nn.Module) -> str:
    import hashlib

    digest = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def save_control_checkpoint(path, model: ControlledDenoiser) -> None:
    base_meta = {"kind": "base", "model_config": model.base.cfg.to_dict()}
    ckpt.save_checkpoint(
        path,
        ckpt.state_dict_to_tensors(model.control.state_dict()),
        meta={
            "kind": "control",
            "model_config": model.base.cfg.to_dict(),
            "variant": model.variant,
            "base_config_hash": ckpt.config_hash(base_meta),
        },
    )


def load_control_checkpoint(path, base: MultiViewUNet) -> ControlledDenoiser:
    tensors, meta = ckpt.load_checkpoint(path)
    if meta.get("kind") != "control":
        raise ValueError(f"{path}: not a control checkpoint (kind={meta.get('kind')!r})")
    base_meta = {"kind": "base", "model_config": base.cfg.to_dict()}
    if meta["base_config_hash"] != ckpt.config_hash(base_meta):
        raise ValueError(
            f"{path}: control checkpoint was trained against a different base configuration"
        )
    model = ControlledDenoiser(base, variant=meta.get("variant", "rel_t_m2"))
    model.control.load_state_dict(ckpt.tensors_to_state_dict(tensors))
    model.eval()
    return model
