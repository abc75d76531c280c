"""Score distillation gradients: conventional SDS, the x0-reconstruction form
with CFG rescale, noise-free score distillation for the texture stage, the
2D+3D hybrid combiner and the timestep-range annealing schedule.

Every operator returns a pixel-space gradient with the same shape as the
rendered input. Gradients reach the 3D parameters through a surrogate loss
0.5 * ||x - stopgrad(x - g)||^2, so any autodiff engine applies them without
custom backward hooks.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .diffusion import GuidanceConfig, NoiseSchedule, add_noise, cfg_combine, cfg_rescale, predict_x0
from .tokens import PromptTokens

ANNEAL_START = (0.98, 0.98)
ANNEAL_END = (0.50, 0.02)


@dataclass
class HybridWeights:
    """Strength of the 2D prior (random views) and 3D prior (canonical views)."""

    lambda_2d: float = 1.0
    lambda_3d: float = 0.1

    def __post_init__(self):
        if self.lambda_2d < 0 or self.lambda_3d < 0:
            raise ValueError("hybrid weights must be nonnegative")
        if self.lambda_2d == 0 and self.lambda_3d == 0:
            raise ValueError("at least one hybrid weight must be positive")


@dataclass(frozen=True)
class AnnealRange:
    t_max_frac: float
    t_min_frac: float

    def __post_init__(self):
        if not 0.0 < self.t_min_frac <= self.t_max_frac <= 1.0:
            raise ValueError(f"need 0 < t_min <= t_max <= 1, got ({self.t_min_frac}, {self.t_max_frac})")


def anneal_range(step: int, total_steps: int) -> AnnealRange:
    """Linear interpolation of the timestep-fraction window over the run."""
    if total_steps < 1:
        raise ValueError("total_steps must be positive")
    frac = min(max(step / total_steps, 0.0), 1.0)
    t_max = ANNEAL_START[0] * (1.0 - frac) + ANNEAL_END[0] * frac
    t_min = ANNEAL_START[1] * (1.0 - frac) + ANNEAL_END[1] * frac
    return AnnealRange(t_max_frac=t_max, t_min_frac=t_min)


def sample_timestep(rng: np.random.Generator, window: AnnealRange, num_steps: int) -> int:
    lo = max(1, int(round(window.t_min_frac * num_steps)))
    hi = max(lo, int(round(window.t_max_frac * num_steps)))
    return int(rng.integers(lo, hi + 1))


@dataclass
class GuidanceContext:
    """A denoiser handle plus everything needed to query it with guidance.

    ``denoise_fn(z_t, t, prompt) -> eps_hat`` hides whether the model is the
    plain base (2D prior) or the controlled multi-view model (3D prior);
    conditioning images and poses are bound inside the closure. ``calls``
    counts denoiser evaluations for instrumentation.
    """

    denoise_fn: object
    prompt: PromptTokens
    schedule: NoiseSchedule
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    negative_prompt: PromptTokens | None = None
    null_prompt: PromptTokens = field(default_factory=PromptTokens.empty)
    weight_fn: object = None  # callable t -> float; None means w(t) = 1
    calls: int = 0

    def predict(self, z_t: torch.Tensor, t: int, prompt: PromptTokens) -> torch.Tensor:
        self.calls += 1
        with torch.no_grad():
            return self.denoise_fn(z_t, t, prompt)

    def weight(self, t: int) -> float:
        return 1.0 if self.weight_fn is None else float(self.weight_fn(t))

    def check_t(self, t: int) -> None:
        if not 1 <= t <= self.schedule.num_steps:
            raise ValueError(f"timestep {t} outside schedule range [1, {self.schedule.num_steps}]")


def sds_gradient(ctx: GuidanceContext, x: torch.Tensor, t: int, eps: torch.Tensor) -> torch.Tensor:
    """Conventional score distillation: w(t) * (eps_hat - eps).

    The constant d(z_t)/dx factor is absorbed into the weighting, per usual
    practice; backpropagation through the renderer supplies dx/dtheta.
    """
    ctx.check_t(t)
    z_t = add_noise(x.detach(), eps, t, ctx.schedule)
    eps_uncond = ctx.predict(z_t, t, ctx.null_prompt)
    eps_cond = ctx.predict(z_t, t, ctx.prompt)
    eps_hat = cfg_combine(eps_uncond, eps_cond, ctx.guidance.scale)
    return ctx.weight(t) * (eps_hat - eps)


def x0_recon_gradient(ctx: GuidanceContext, x_views: torch.Tensor, t: int, eps: torch.Tensor) -> torch.Tensor:
    """Clean-image reconstruction gradient 2 * (x - stopgrad(x0_hat)).

    x0_hat is the CFG-rescaled clean estimate from the guided and the
    prompt-conditioned noise predictions; used with a large guidance scale
    for the multi-view prior.
    """
    ctx.check_t(t)
    z_t = add_noise(x_views.detach(), eps, t, ctx.schedule)
    eps_uncond = ctx.predict(z_t, t, ctx.null_prompt)
    eps_cond = ctx.predict(z_t, t, ctx.prompt)
    eps_cfg = cfg_combine(eps_uncond, eps_cond, ctx.guidance.scale)
    x0_cfg = predict_x0(z_t, eps_cfg, t, ctx.schedule)
    x0_cond = predict_x0(z_t, eps_cond, t, ctx.schedule)
    x0_hat = cfg_rescale(x0_cfg, x0_cond, ctx.guidance.rescale_factor)
    return 2.0 * (x_views - x0_hat)


def nfsd_gradient(
    ctx: GuidanceContext, x: torch.Tensor, t: int, eps: torch.Tensor, t_switch: int = 200
) -> torch.Tensor:
    """Noise-free score distillation with a negative prompt in the
    conditional delta; three denoiser evaluations per call."""
    ctx.check_t(t)
    if ctx.negative_prompt is None:
        raise ValueError("nfsd_gradient needs a negative prompt in the guidance context")
    z_t = add_noise(x.detach(), eps, t, ctx.schedule)
    eps_prompt = ctx.predict(z_t, t, ctx.prompt)
    eps_neg = ctx.predict(z_t, t, ctx.negative_prompt)
    eps_null = ctx.predict(z_t, t, ctx.null_prompt)
    delta_c = eps_prompt - eps_neg
    delta_d = eps_null if t < t_switch else eps_null - eps_neg
    return ctx.weight(t) * (delta_d + ctx.guidance.scale * delta_c)


def surrogate_loss(x: torch.Tensor, grad: torch.Tensor) -> torch.Tensor:
    """0.5 * ||x - stopgrad(x - g)||^2; its x-gradient is exactly g."""
    target = (x - grad).detach()
    return 0.5 * ((x - target) ** 2).sum()


def param_gradients(
    loss: torch.Tensor, params: dict[str, torch.Tensor], retain_graph: bool = False
) -> dict[str, torch.Tensor]:
    """Named parameter gradients of a scalar loss (absent entries are zero)."""
    names = list(params)
    grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True, retain_graph=retain_graph)
    return {n: g for n, g in zip(names, grads) if g is not None}


def hybrid_combine(
    weights: HybridWeights, g2d: dict[str, torch.Tensor], g3d: dict[str, torch.Tensor]
) -> dict[str, torch.Tensor]:
    """lambda_2d * g2d + lambda_3d * g3d over named gradient dicts."""
    out: dict[str, torch.Tensor] = {}
    for name in set(g2d) | set(g3d):
        total = None
        if name in g2d:
            total = weights.lambda_2d * g2d[name]
        if name in g3d:
            term = weights.lambda_3d * g3d[name]
            total = term if total is None else total + term
        out[name] = total
    return out


def hybrid_step(
    weights: HybridWeights,
    g2d: dict[str, torch.Tensor],
    g3d: dict[str, torch.Tensor],
    params: dict[str, torch.Tensor],
) -> dict[str, torch.Tensor]:
    """Accumulate the combined gradient into ``.grad`` of the given
    parameters (ready for one optimizer step); returns the combined dict."""
    combined = hybrid_combine(weights, g2d, g3d)
    for name, grad in combined.items():
        p = params[name]
        p.grad = grad.clone() if p.grad is None else p.grad + grad
    return combined
