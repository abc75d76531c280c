"""The base multi-view denoiser: a small pixel-space U-Net over four views
with joint cross-view attention, timestep/camera embedding injection and
token-table text conditioning.

A batch item is a stack of views shaped (V, C, H, W) with V of 1 (2D mode)
or 4 (multi-view mode); the model itself runs on (B, V, C, H, W). Attention
concatenates the spatial tokens of all views of a scene before the joint
softmax, which is what ties the four denoising trajectories together.
"""
from __future__ import annotations

import copy
import math
import time
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint as ckpt
from .cameras import CameraPose
from .diffusion import add_noise, build_schedule, diffusion_loss
from .tokens import VOCAB, PromptTokens

VALID_VIEW_COUNTS = (1, 4)


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    in_channels: int = 3
    base_width: int = 64
    channel_mults: tuple = (1, 2, 2)
    emb_dim: int = 128
    attn_resolutions: tuple = (16, 8)
    num_heads: int = 4
    vocab_size: int = len(VOCAB)
    num_steps: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mults"] = list(self.channel_mults)
        d["attn_resolutions"] = list(self.attn_resolutions)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        d["channel_mults"] = tuple(d["channel_mults"])
        d["attn_resolutions"] = tuple(d["attn_resolutions"])
        return ModelConfig(**d)


@dataclass
class ConditioningVectors:
    """Per-call embeddings: shared timestep vector plus one vector per view."""

    t_emb: torch.Tensor  # (B, E)
    view_emb: torch.Tensor  # (B, V, E)


def timestep_embedding(t, dim: int) -> torch.Tensor:
    """Sinusoidal features, first half sin and second half cos."""
    if dim % 2 != 0:
        raise ValueError(f"embedding dim must be even, got {dim}")
    t = torch.as_tensor(t, dtype=torch.float32)
    scalar = t.ndim == 0
    t = t.reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half - 1, 1))
    args = t[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    return emb[0] if scalar else emb


def zero_module(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


def joint_view_attention(tokens: torch.Tensor, qkv: nn.Linear, proj: nn.Linear, num_heads: int) -> torch.Tensor:
    """Self-attention over the concatenated tokens of all views.

    ``tokens`` is (V, L, C); the views are flattened into one (V*L, C)
    sequence, attended jointly, and split back, so view order only permutes
    the output. With a single view this is ordinary self-attention.
    """
    v, length, ch = tokens.shape
    flat = tokens.reshape(1, v * length, ch)
    q, k, val = qkv(flat).chunk(3, dim=-1)

    def heads(x):
        return x.reshape(1, v * length, num_heads, ch // num_heads).transpose(1, 2)

    out = F.scaled_dot_product_attention(heads(q), heads(k), heads(val))
    out = out.transpose(1, 2).reshape(1, v * length, ch)
    return proj(out).reshape(v, length, ch)


class CrossViewAttention(nn.Module):
    """Spatial attention block whose softmax spans all views of a scene."""

    def __init__(self, channels: int, num_heads: int):
        super().__init__()
        if channels % num_heads != 0:
            raise ValueError(f"channels ({channels}) must divide into {num_heads} heads")
        self.num_heads = num_heads
        self.norm = nn.GroupNorm(8, channels)
        self.qkv = nn.Linear(channels, channels * 3)
        self.proj = nn.Linear(channels, channels)

    def forward(self, x: torch.Tensor, views: int) -> torch.Tensor:
        # batched form of joint_view_attention: one (V*H*W)-token sequence
        # per scene
        bv, c, h, w = x.shape
        b = bv // views
        tokens = self.norm(x).reshape(b, views, c, h * w).permute(0, 1, 3, 2).reshape(b, views * h * w, c)
        q, k, v = self.qkv(tokens).chunk(3, dim=-1)

        def heads(y):
            return y.reshape(b, -1, self.num_heads, c // self.num_heads).transpose(1, 2)

        out = F.scaled_dot_product_attention(heads(q), heads(k), heads(v))
        out = self.proj(out.transpose(1, 2).reshape(b, -1, c))
        out = out.reshape(b, views, h * w, c).permute(0, 1, 3, 2).reshape(bv, c, h, w)
        return x + out


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, out_ch)
        self.norm2 = nn.GroupNorm(8, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class UNetEncoder(nn.Module):
    """conv_in + down path; emits one skip tensor per block (the ControlNet
    attachment points)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.base_width
        chans = [w * m for m in cfg.channel_mults]
        self.conv_in = nn.Conv2d(cfg.in_channels, chans[0], 3, padding=1)
        self.blocks = nn.ModuleList()
        self.block_kinds: list[str] = []
        res = cfg.image_size
        in_ch = chans[0]
        self.skip_channels = [in_ch]
        for level, ch in enumerate(chans):
            block = nn.ModuleDict({"res": ResBlock(in_ch, ch, cfg.emb_dim)})
            if res in cfg.attn_resolutions:
                block["attn"] = CrossViewAttention(ch, cfg.num_heads)
            self.blocks.append(block)
            self.block_kinds.append("res")
            in_ch = ch
            self.skip_channels.append(in_ch)
            if level < len(chans) - 1:
                self.blocks.append(nn.ModuleDict({"down": nn.Conv2d(in_ch, in_ch, 3, stride=2, padding=1)}))
                self.block_kinds.append("down")
                res //= 2
                self.skip_channels.append(in_ch)
        self.mid1 = ResBlock(in_ch, in_ch, cfg.emb_dim)
        self.mid_attn = CrossViewAttention(in_ch, cfg.num_heads)
        self.mid2 = ResBlock(in_ch, in_ch, cfg.emb_dim)
        self.out_channels = in_ch

    def forward(self, x: torch.Tensor, emb: torch.Tensor, views: int):
        h = self.conv_in(x)
        skips = [h]
        for block in self.blocks:
            if "res" in block:
                h = block["res"](h, emb)
                if "attn" in block:
                    h = block["attn"](h, views)
            else:
                h = block["down"](h)
            skips.append(h)
        h = self.mid1(h, emb)
        h = self.mid_attn(h, views)
        h = self.mid2(h, emb)
        return h, skips


class MultiViewUNet(nn.Module):
    """Four-view epsilon-prediction U-Net with token-table text conditioning."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        e = cfg.emb_dim
        self.token_table = nn.Embedding(cfg.vocab_size, e)
        self.time_mlp = nn.Sequential(nn.Linear(e, e), nn.SiLU(), nn.Linear(e, e))
        # final layer zero-initialized: untrained poses contribute nothing
        self.camera_mlp = nn.Sequential(nn.Linear(16, e), nn.SiLU(), zero_module(nn.Linear(e, e)))

        self.encoder = UNetEncoder(cfg)
        chans = [cfg.base_width * m for m in cfg.channel_mults]
        self.decoder = nn.ModuleList()
        res = cfg.image_size // (2 ** (len(chans) - 1))
        skip_channels = list(self.encoder.skip_channels)
        in_ch = self.encoder.out_channels
        for level in reversed(range(len(chans))):
            ch = chans[level]
            for i in range(2):
                block = nn.ModuleDict({"res": ResBlock(in_ch + skip_channels.pop(), ch, cfg.emb_dim)})
                if res in cfg.attn_resolutions:
                    block["attn"] = CrossViewAttention(ch, cfg.num_heads)
                last_of_level = i == 1
                if last_of_level and level > 0:
                    block["up"] = nn.Conv2d(ch, ch, 3, padding=1)
                self.decoder.append(block)
                in_ch = ch
            res *= 2
        self.norm_out = nn.GroupNorm(8, chans[0])
        self.conv_out = zero_module(nn.Conv2d(chans[0], cfg.in_channels, 3, padding=1))

    # ---- embeddings ----

    def embed_timestep(self, t) -> torch.Tensor:
        emb = timestep_embedding(t, self.cfg.emb_dim)
        if emb.ndim == 1:
            emb = emb[None]
        return self.time_mlp(emb)

    def embed_prompt(self, prompts: list[PromptTokens]) -> torch.Tensor:
        pooled = []
        for p in prompts:
            ids = torch.as_tensor(p.ids, dtype=torch.long)
            pooled.append(self.token_table(ids).mean(dim=0))
        return torch.stack(pooled)

    def camera_embedding(self, pose: CameraPose) -> torch.Tensor:
        """Embedding of a single camera-to-world matrix (flattened row-major)."""
        flat = torch.as_tensor(pose.to_flat(), dtype=torch.float32)
        return self.camera_mlp(flat)

    def embed_cameras(self, poses: list[list[CameraPose]]) -> torch.Tensor:
        flat = torch.tensor(
            [[p.to_flat() for p in scene] for scene in poses], dtype=torch.float32
        )
        return self.camera_mlp(flat)

    def make_conditioning(self, t, poses: list[list[CameraPose]] | None, batch: int, views: int) -> ConditioningVectors:
        """Timestep plus camera view embeddings; poses=None zeroes the camera
        path (the 2D branch)."""
        t_emb = self.embed_timestep(t)
        if t_emb.shape[0] == 1 and batch > 1:
            t_emb = t_emb.expand(batch, -1)
        if poses is None:
            view_emb = torch.zeros(batch, views, self.cfg.emb_dim)
        else:
            view_emb = self.embed_cameras(poses)
        return ConditioningVectors(t_emb=t_emb, view_emb=view_emb)

    # ---- denoising ----

    def forward(self, z: torch.Tensor, emb: torch.Tensor, residuals: list[torch.Tensor] | None = None) -> torch.Tensor:
        """Predict noise for z (B, V, C, H, W) given per-view embeddings
        (B, V, E); optional residuals are added to the encoder skips plus the
        mid output (the control-branch injection points)."""
        b, v, c, h, w = z.shape
        x = z.reshape(b * v, c, h, w)
        e = emb.reshape(b * v, -1)
        hidden, skips = self.encoder(x, e, views=v)
        if residuals is not None:
            if len(residuals) != len(skips) + 1:
                raise ValueError(f"expected {len(skips) + 1} residuals, got {len(residuals)}")
            skips = [s + r for s, r in zip(skips, residuals[:-1])]
            hidden = hidden + residuals[-1]
        for block in self.decoder:
            hidden = block["res"](torch.cat([hidden, skips.pop()], dim=1), e)
            if "attn" in block:
                hidden = block["attn"](hidden, views=v)
            if "up" in block:
                hidden = block["up"](F.interpolate(hidden, scale_factor=2, mode="nearest"))
        out = self.conv_out(F.silu(self.norm_out(hidden)))
        return out.reshape(b, v, c, h, w)

    def denoise(self, z: torch.Tensor, t, prompt: PromptTokens | list[PromptTokens], cond: ConditioningVectors) -> torch.Tensor:
        """Noise prediction with prompt conditioning folded into the per-view
        embedding: emb[k] = t_emb + prompt_emb + view_emb[k]."""
        squeeze = z.ndim == 4
        if squeeze:
            z = z[None]
        if z.ndim != 5:
            raise ValueError(f"expected (B, V, C, H, W) latents, got shape {tuple(z.shape)}")
        b, v = z.shape[:2]
        if v not in VALID_VIEW_COUNTS:
            raise ValueError(f"view count must be one of {VALID_VIEW_COUNTS}, got {v}")
        if not torch.isfinite(z).all():
            raise ValueError("latents contain non-finite values")
        prompts = [prompt] * b if isinstance(prompt, PromptTokens) else list(prompt)
        p_emb = self.embed_prompt(prompts)
        t_emb = cond.t_emb if cond.t_emb.ndim == 2 else cond.t_emb[None]
        view_emb = cond.view_emb if cond.view_emb.ndim == 3 else cond.view_emb[None]
        if view_emb.shape[1] != v:
            raise ValueError(f"view_emb has {view_emb.shape[1]} rows for {v} views")
        emb = (t_emb + p_emb)[:, None, :] + view_emb
        out = self(z, emb)
        return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainBaseConfig:
    steps: int = 2000
    batch_scenes: int = 2
    lr: float = 2e-3
    weight_decay: float = 1e-4
    seed: int = 0
    heldout_items: int = 8
    log_every: int = 50


def prepare_item(item, sched, rng: np.random.Generator, model_cfg: ModelConfig):
    """Noised tensors and embedding ingredients for one training item."""
    x0 = torch.from_numpy(np.ascontiguousarray(item.images)).permute(0, 3, 1, 2).float() * 2.0 - 1.0
    t = int(rng.integers(1, model_cfg.num_steps + 1))
    eps = torch.from_numpy(rng.standard_normal(x0.shape).astype(np.float32))
    z_t = add_noise(x0, eps, t, sched)
    return x0, t, eps, z_t


def _base_step_loss(model: MultiViewUNet, items, sched, rng: np.random.Generator) -> torch.Tensor:
    losses = []
    for item in items:
        _, t, eps, z_t = prepare_item(item, sched, rng, model.cfg)
        poses = None if item.is_2d else [list(item.abs_poses)]
        cond = model.make_conditioning(t, poses, batch=1, views=z_t.shape[0])
        eps_hat = model.denoise(z_t, t, item.prompt, cond)
        losses.append(diffusion_loss(eps_hat, eps))
    return torch.stack(losses).mean()


def train_base(dataset, config: TrainBaseConfig, model_cfg: ModelConfig | None = None, log=None):
    """Train the base denoiser; returns (model, metrics list).

    ``dataset`` is an iterator of MultiViewBatch items (see data.batch_stream).
    """
    model_cfg = model_cfg or ModelConfig()
    torch.manual_seed(config.seed)
    model = MultiViewUNet(model_cfg)
    sched = build_schedule(model_cfg.num_steps, model_cfg.beta_min, model_cfg.beta_max)
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)

    data_iter = iter(dataset)
    try:
        heldout = [next(data_iter) for _ in range(config.heldout_items)]
        first = next(data_iter)
    except StopIteration:
        raise ValueError("dataset is empty or smaller than the held-out split") from None
    data_iter = _chain_one(first, data_iter)

    def heldout_loss() -> float:
        eval_rng = np.random.default_rng(12345)
        with torch.no_grad():
            return float(_base_step_loss(model, heldout, sched, eval_rng)) if heldout else 0.0

    metrics = []
    initial_heldout = heldout_loss()
    empty_prompts = 0
    total_items = 0
    t_start = time.time()
    for step in range(config.steps):
        items = [next(data_iter) for _ in range(config.batch_scenes)]
        empty_prompts += sum(item.prompt.is_empty for item in items)
        total_items += len(items)
        loss = _base_step_loss(model, items, sched, rng)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % config.log_every == 0 or step == config.steps - 1:
            rec = {
                "step": step,
                "loss": float(loss.detach()),
                "empty_prompt_fraction": empty_prompts / max(total_items, 1),
                "elapsed_s": time.time() - t_start,
            }
            metrics.append(rec)
            if log:
                log(rec)
    final_heldout = heldout_loss()
    metrics.append(
        {
            "step": config.steps,
            "heldout_initial": initial_heldout,
            "heldout_final": final_heldout,
            "empty_prompt_fraction": empty_prompts / max(total_items, 1),
            "elapsed_s": time.time() - t_start,
        }
    )
    return model, metrics


def _chain_one(first, rest):
    yield first
    yield from rest


def save_base_checkpoint(path, model: MultiViewUNet) -> None:
    ckpt.save_checkpoint(
        path,
        ckpt.state_dict_to_tensors(model.state_dict()),
        meta={"kind": "base", "model_config": model.cfg.to_dict()},
    )


def load_base_checkpoint(path) -> MultiViewUNet:
    tensors, meta = ckpt.load_checkpoint(path)
    if meta.get("kind") != "base":
        raise ValueError(f"{path}: not a base checkpoint (kind={meta.get('kind')!r})")
    model = MultiViewUNet(ModelConfig.from_dict(meta["model_config"]))
    model.load_state_dict(ckpt.tensors_to_state_dict(tensors))
    model.eval()
    return model
