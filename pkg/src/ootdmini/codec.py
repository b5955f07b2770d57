"""Tiny deterministic autoencoder mapping 3xHxW images to 4x(H/8)x(W/8) latents.

It stands in for a pretrained latent-diffusion VAE: trained once on synthetic
images with a pixel MSE objective, then frozen.  ``encode`` has no sampling
step.  Latents are multiplied by a scale factor (1/std of the training
latents) so diffusion sees roughly unit-variance inputs.
"""

from __future__ import annotations

import logging
import math
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InputError, ShapeError
from .numerics import Rng, seeded_torch

log = logging.getLogger(__name__)

LATENT_CHANNELS = 4
DEFAULT_STEPS = 24000
DEFAULT_LR = 2e-3
DEFAULT_CROP = (32, 24)


def _res(ch: int) -> nn.Module:
    return nn.Sequential(nn.SiLU(), nn.Conv2d(ch, ch, 3, padding=1), nn.SiLU(), nn.Conv2d(ch, ch, 3, padding=1))


class _Residual(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.body = _res(ch)

    def forward(self, x):
        return x + self.body(x)


def _up(cin: int, cout: int) -> nn.Module:
    # nearest upsampling + conv avoids the checkerboard of transposed convs
    return nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(cin, cout, 3, padding=1), nn.SiLU())


class Codec(nn.Module):
    """Three stride-2 stages each way; widths ``base, 2*base, 4*base``."""

    def __init__(self, base: int = 16):
        super().__init__()
        w1, w2, w3 = base, 2 * base, 4 * base
        self.encoder = nn.Sequential(
            nn.Conv2d(3, w1, 3, padding=1),
            _Residual(w1),
            nn.Conv2d(w1, w1, 3, stride=2, padding=1),
            _Residual(w1),
            nn.Conv2d(w1, w2, 3, stride=2, padding=1),
            _Residual(w2),
            nn.Conv2d(w2, w3, 3, stride=2, padding=1),
            _Residual(w3),
            nn.SiLU(),
            nn.Conv2d(w3, LATENT_CHANNELS, 1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(LATENT_CHANNELS, w3, 3, padding=1),
            _Residual(w3),
            _up(w3, w2),
            _Residual(w2),
            _up(w2, w1),
            _Residual(w1),
            _up(w1, w1),
            _Residual(w1),
            nn.SiLU(),
            nn.Conv2d(w1, 3, 3, padding=1),
        )
        self.register_buffer("latent_scale", torch.ones(()))
        self.frozen = False

    def freeze(self) -> Codec:
        self.frozen = True
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def _raw_decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z) + 0.5

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        return self._raw_decode(self.encoder(img))

    def encode(self, img: torch.Tensor) -> torch.Tensor:
        """3xHxW (or Bx3xHxW) image -> 4x(H/8)x(W/8) latent."""
        x, squeeze = _batched(img, 3, "image")
        if x.shape[-2] % 8 or x.shape[-1] % 8:
            raise ShapeError(f"image dims must be divisible by 8, got {tuple(x.shape[-2:])}")
        z = self.encoder(x) * self.latent_scale
        return z[0] if squeeze else z

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        """4xhxw latent -> 3x(8h)x(8w) image clamped to [0, 1]."""
        zb, squeeze = _batched(z, LATENT_CHANNELS, "latent")
        img = self._raw_decode(zb / self.latent_scale).clamp(0.0, 1.0)
        return img[0] if squeeze else img


class IdentityCodec(nn.Module):
    """Debug codec: diffusion runs at pixel resolution, 4th channel zero."""

    frozen = True

    def encode(self, img: torch.Tensor) -> torch.Tensor:
        x, squeeze = _batched(img, 3, "image")
        z = torch.cat([x * 2 - 1, torch.zeros_like(x[:, :1])], dim=1)
        return z[0] if squeeze else z

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        zb, squeeze = _batched(z, LATENT_CHANNELS, "latent")
        img = ((zb[:, :3] + 1) / 2).clamp(0.0, 1.0)
        return img[0] if squeeze else img

    def freeze(self) -> IdentityCodec:
        return self


def _batched(t: torch.Tensor, channels: int, what: str) -> tuple[torch.Tensor, bool]:
    if t.dim() == 3:
        t, squeeze = t[None], True
    elif t.dim() == 4:
        squeeze = False
    else:
        raise ShapeError(f"{what} must be CxHxW or BxCxHxW, got shape {tuple(t.shape)}")
    if t.shape[1] != channels:
        raise ShapeError(f"{what} must have {channels} channels, got {t.shape[1]}")
    return t, squeeze


def psnr(a: torch.Tensor, b: torch.Tensor, peak: float = 1.0) -> float:
    mse = torch.mean((a.double() - b.double()) ** 2).item()
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)


def pretrain_codec(
    dataset: Sequence[torch.Tensor],
    steps: int,
    rng: Rng,
    batch_size: int = 16,
    lr: float = DEFAULT_LR,
    base: int = 16,
    log_every: int = 250,
    crop: tuple[int, int] | None = DEFAULT_CROP,
) -> tuple[Codec, list[tuple[int, float]]]:
    """Fit the autoencoder on ``dataset`` (list of 3xHxW images), freeze it and
    return it with the (step, loss) training curve.

    With ``crop``, each step trains on one random window of that size per
    image, at offsets on the 8-pixel latent grid.  The model is fully
    convolutional, so this buys more steps per second at no loss of generality."""
    if len(dataset) == 0:
        raise InputError("codec pretraining needs a nonempty dataset")
    if steps <= 0:
        raise InputError(f"steps must be positive, got {steps}")
    images = torch.stack(list(dataset))
    _batched(images, 3, "image")
    with seeded_torch(rng.fork("init")):
        model = Codec(base)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=steps, pct_start=0.05)
    batch_rng = rng.fork("batches")
    curve = []
    for step in range(1, steps + 1):
        idx = torch.from_numpy(batch_rng.integers(0, len(images), size=min(batch_size, len(images))))
        x = images[idx]
        if crop is not None and tuple(crop) != tuple(x.shape[-2:]):
            ch, cw = crop
            oy = 8 * int(batch_rng.integers(0, (x.shape[-2] - ch) // 8 + 1))
            ox = 8 * int(batch_rng.integers(0, (x.shape[-1] - cw) // 8 + 1))
            x = x[..., oy : oy + ch, ox : ox + cw]
        loss = F.mse_loss(model(x), x)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step()
        sched.step()
        if step % log_every == 0 or step == steps:
            curve.append((step, loss.item()))
            log.info("codec step %d loss %.6f", step, loss.item())

    with torch.no_grad():
        z = torch.cat([model.encoder(images[i : i + 64]) for i in range(0, len(images), 64)])
        model.latent_scale.fill_(1.0 / max(z.std().item(), 1e-6))
    return model.freeze(), curve
