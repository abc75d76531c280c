"""Noise schedule, forward diffusion, CFG and the deterministic sampler.

Timesteps are 1-based: ``t`` runs over ``1..T`` and ``alpha_bar_at(0) == 1``
(the fully-denoised boundary used by the sampler's final step). The schedule
tables are computed in float64 and cast to the dtype of whatever tensor they
are combined with, so the same code path serves float32 models and float64
numerical tests.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variances and their running products.

    ``beta[i]``, ``alpha[i]`` and ``alpha_bar[i]`` hold the values for
    timestep ``t = i + 1``.
    """

    num_steps: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def alpha_bar_at(self, t) -> np.ndarray:
        """Cumulative product at 1-based timestep(s) ``t``; ``t = 0`` gives 1."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.num_steps):
            raise ValueError(f"timestep out of range [0, {self.num_steps}]: {t}")
        table = np.concatenate([[1.0], self.alpha_bar])
        return table[t]


@dataclass(frozen=True)
class GuidanceConfig:
    """Classifier-free guidance scale and rescale factor."""

    scale: float = 7.5
    rescale_factor: float = 0.0

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError(f"guidance scale must be nonnegative, got {self.scale}")
        if not 0.0 <= self.rescale_factor <= 1.0:
            raise ValueError(f"rescale factor must be in [0, 1], got {self.rescale_factor}")


def build_schedule(num_steps: int, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule with running-product alpha_bar."""
    if num_steps < 2:
        raise ValueError(f"need at least 2 steps, got {num_steps}")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})")
    beta = np.linspace(beta_min, beta_max, num_steps, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(num_steps=num_steps, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def _coeff(values: np.ndarray, like: torch.Tensor) -> torch.Tensor:
    """Shape schedule coefficients to broadcast over ``like``'s trailing dims."""
    coeff = torch.as_tensor(values, dtype=like.dtype, device=like.device)
    if coeff.ndim == 0:
        return coeff
    if coeff.shape[0] != like.shape[0]:
        raise ValueError(f"per-sample timesteps ({coeff.shape[0]}) do not match batch ({like.shape[0]})")
    return coeff.reshape(-1, *([1] * (like.ndim - 1)))


def add_noise(x0: torch.Tensor, eps: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    """Forward process: sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps."""
    if x0.shape != eps.shape:
        raise ValueError(f"x0 shape {tuple(x0.shape)} != eps shape {tuple(eps.shape)}")
    ab = sched.alpha_bar_at(t)
    if np.any(np.asarray(t) < 1):
        raise ValueError(f"add_noise needs t in [1, {sched.num_steps}], got {t}")
    return _coeff(np.sqrt(ab), x0) * x0 + _coeff(np.sqrt(1.0 - ab), x0) * eps


def predict_x0(z_t: torch.Tensor, eps_hat: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    """Invert the forward process given a noise prediction."""
    if z_t.shape != eps_hat.shape:
        raise ValueError(f"z_t shape {tuple(z_t.shape)} != eps_hat shape {tuple(eps_hat.shape)}")
    ab = sched.alpha_bar_at(t)
    if np.any(ab <= 0):
        raise ValueError("alpha_bar must be positive to invert the forward process")
    return (z_t - _coeff(np.sqrt(1.0 - ab), z_t) * eps_hat) / _coeff(np.sqrt(ab), z_t)


def diffusion_loss(eps_hat: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Noise reconstruction loss: mean squared error over all elements."""
    if eps_hat.shape != eps.shape:
        raise ValueError(f"eps_hat shape {tuple(eps_hat.shape)} != eps shape {tuple(eps.shape)}")
    return torch.mean((eps_hat - eps) ** 2)


def cfg_combine(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, scale: float) -> torch.Tensor:
    """Guided prediction: eps_uncond + scale * (eps_cond - eps_uncond)."""
    return eps_uncond + scale * (eps_cond - eps_uncond)


def cfg_rescale(x0_cfg: torch.Tensor, x0_cond: torch.Tensor, factor: float) -> torch.Tensor:
    """Damp the std inflation of a guided clean-image estimate.

    Per-sample standard deviations are taken over everything but the leading
    (batch/view) dimension. Samples whose guided std is zero pass through
    unchanged.
    """
    if not 0.0 <= factor <= 1.0:
        raise ValueError(f"rescale factor must be in [0, 1], got {factor}")
    if factor == 0.0:
        return x0_cfg
    dims = tuple(range(1, x0_cfg.ndim))
    std_cond = torch.std(x0_cond, dim=dims, keepdim=True)
    std_cfg = torch.std(x0_cfg, dim=dims, keepdim=True)
    rescaled = torch.where(std_cfg > 0, x0_cfg * std_cond / torch.where(std_cfg > 0, std_cfg, torch.ones_like(std_cfg)), x0_cfg)
    return factor * rescaled + (1.0 - factor) * x0_cfg


def ddim_step(z_t: torch.Tensor, eps_hat: torch.Tensor, t: int, t_prev: int, sched: NoiseSchedule) -> torch.Tensor:
    """Deterministic reverse step from t to t_prev (eta = 0)."""
    if t_prev > t:
        raise ValueError(f"t_prev ({t_prev}) must not exceed t ({t})")
    x0 = predict_x0(z_t, eps_hat, t, sched)
    ab_prev = sched.alpha_bar_at(t_prev)
    return _coeff(np.sqrt(ab_prev), z_t) * x0 + _coeff(np.sqrt(1.0 - ab_prev), z_t) * eps_hat


def ddim_timesteps(num_steps: int, num_inference_steps: int) -> list[int]:
    """Descending 1-based timestep ladder for the deterministic sampler."""
    if not 1 <= num_inference_steps <= num_steps:
        raise ValueError(f"need 1 <= inference steps <= {num_steps}, got {num_inference_steps}")
    ts = np.linspace(num_steps, 1, num_inference_steps)
    return [int(round(t)) for t in ts]
