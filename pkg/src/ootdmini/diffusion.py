"""Noise schedule, forward noising, training loss, guidance and DDIM sampling."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import RangeError, ShapeError
from .numerics import Rng, normal
from .ootdnet import denoise_forward

GUIDANCE_PROFILES = {"viton-hd": 1.5, "dress-code": 2.0}


class NoiseSchedule:
    """Linear betas; ``alpha_bars[0] = 1`` so index t addresses step t."""

    def __init__(self, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2):
        if T < 1:
            raise RangeError(f"T must be >= 1, got {T}")
        self.T = T
        self.betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.concatenate([[1.0], np.cumprod(self.alphas)])

    def coefficients(self, t) -> tuple[np.ndarray, np.ndarray]:
        """sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t) for integer t (scalar or array)."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise RangeError(f"timestep out of range [0, {self.T}]: {t}")
        ab = self.alpha_bars[t]
        return np.sqrt(ab), np.sqrt(1.0 - ab)


@dataclass
class SampleConfig:
    sampler_steps: int = 20
    guidance_scale: float = 1.5
    seed: int = 0

    def validate(self, T: int) -> None:
        if not self.guidance_scale >= 1.0:
            raise RangeError(f"guidance scale must be >= 1, got {self.guidance_scale}")
        if not 1 <= self.sampler_steps <= T:
            raise RangeError(f"sampler_steps must be in [1, {T}], got {self.sampler_steps}")

    def to_dict(self) -> dict:
        return asdict(self)


def _per_sample(coef: np.ndarray, ref: torch.Tensor) -> torch.Tensor:
    c = torch.as_tensor(np.asarray(coef, dtype=np.float64)).to(ref.dtype)
    return c.reshape(-1, *([1] * (ref.dim() - 1))) if c.dim() == 1 else c


def add_noise(sch: NoiseSchedule, z0: torch.Tensor, eps: torch.Tensor, t) -> torch.Tensor:
    """sqrt(ab_t) * z0 + sqrt(1 - ab_t) * eps.  ``t`` may be a scalar or one
    timestep per leading batch entry; t = 0 returns ``z0`` unchanged."""
    if z0.shape != eps.shape:
        raise ShapeError(f"z0 {tuple(z0.shape)} and eps {tuple(eps.shape)} differ")
    a, b = sch.coefficients(t.numpy() if torch.is_tensor(t) else t)
    return _per_sample(a, z0) * z0 + _per_sample(b, z0) * eps


def loss_ootd(eps_pred: torch.Tensor, eps_true: torch.Tensor) -> torch.Tensor:
    if eps_pred.shape != eps_true.shape:
        raise ShapeError(f"prediction {tuple(eps_pred.shape)} and target {tuple(eps_true.shape)} differ")
    return F.mse_loss(eps_pred, eps_true)


def cfg_combine(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, s_g: float) -> torch.Tensor:
    """eps_uncond + s_g * (eps_cond - eps_uncond)."""
    if eps_cond.shape != eps_uncond.shape:
        raise ShapeError(f"conditional {tuple(eps_cond.shape)} and unconditional {tuple(eps_uncond.shape)} differ")
    if s_g < 1.0:
        raise RangeError(f"guidance scale must be >= 1, got {s_g}")
    if s_g == 1.0:
        # exact, not just up to rounding
        return eps_cond.clone()
    return eps_uncond + s_g * (eps_cond - eps_uncond)


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Evenly spaced decreasing timesteps from T down to 1."""
    return [int(v) for v in np.floor(np.linspace(T, 1, steps) + 0.5)]


EpsModel = Callable[[torch.Tensor, int, "list | None", torch.Tensor], torch.Tensor]


def ddim_sample(
    e: nn.Module | EpsModel,
    sch: NoiseSchedule,
    xm_latent: torch.Tensor,
    feats_cond: list[torch.Tensor] | None,
    feats_uncond: list[torch.Tensor] | None,
    psi: torch.Tensor,
    cfg: SampleConfig,
    *,
    psi_uncond: torch.Tensor | None = None,
    force_both_branches: bool = False,
    step_callback: Callable[[int, int, torch.Tensor], None] | None = None,
) -> torch.Tensor:
    """Deterministic DDIM (eta = 0) with garment guidance.

    ``e`` is the denoising UNet, or any callable ``(zin, t, feats, psi) -> eps``.
    The unconditional branch is skipped when ``s_g == 1`` unless
    ``force_both_branches``.  Initial noise comes from ``Rng(cfg.seed)``, so
    every image in a batch and every run with the same seed starts from the
    same noise.  ``step_callback(step_index, t, zin)`` sees each model input.
    """
    cfg.validate(sch.T)
    eps_fn = (lambda z, t, f, p: denoise_forward(e, z, t, f, p)) if isinstance(e, nn.Module) else e
    squeeze = xm_latent.dim() == 3
    xm = xm_latent[None] if squeeze else xm_latent
    if psi_uncond is None:
        psi_uncond = psi

    x = normal(Rng(cfg.seed).fork("ddim-init"), (1, *xm.shape[1:])).expand(xm.shape[0], -1, -1, -1).double()
    two_branch = force_both_branches or cfg.guidance_scale != 1.0
    ts = ddim_timesteps(sch.T, cfg.sampler_steps)
    with torch.no_grad():
        for i, t in enumerate(ts):
            zin = torch.cat([xm, x.to(xm.dtype)], dim=1)
            if step_callback is not None:
                step_callback(i, t, zin)
            eps = eps_fn(zin, t, feats_cond, psi)
            if two_branch:
                eps_u = eps_fn(zin, t, feats_uncond, psi_uncond)
                eps = cfg_combine(eps, eps_u, cfg.guidance_scale)
            eps = eps.double()
            ab_t = sch.alpha_bars[t]
            ab_prev = sch.alpha_bars[ts[i + 1]] if i + 1 < len(ts) else 1.0
            x0 = (x - np.sqrt(1.0 - ab_t) * eps) / np.sqrt(ab_t)
            x = np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps
    x = x.float()
    return x[0] if squeeze else x
