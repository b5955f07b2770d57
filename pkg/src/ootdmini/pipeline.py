"""Model bundle (conditioning encoder + both UNets) and end-to-end try-on sampling."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from .condenc import CondEncoder, label_index
from .diffusion import NoiseSchedule, SampleConfig, ddim_sample
from .numerics import Rng, seeded_torch
from .ootdnet import build_denoising_unet, build_outfitting_unet, outfit_forward


@dataclass
class ModelConfig:
    base_width: int = 32
    num_heads: int = 4
    d_cond: int = 64
    cond_width: int = 16
    # timestep fed to the outfitting UNet's single forward pass
    outfit_timestep: int = 0
    # null psi together with the garment latent in the unconditional branch
    drop_psi_with_garment: bool = False
    # unconditional branch without fusion instead of fusing the zero-latent features
    skip_fusion_uncond: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


class OOTDModel(nn.Module):
    """Trainable parameters: conditioning encoder, outfitting UNet, denoising UNet."""

    def __init__(self, cfg: ModelConfig | None = None, rng: Rng | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        rng = rng or Rng(0)
        c = self.cfg
        with seeded_torch(rng.fork("cond")):
            self.cond = CondEncoder(c.d_cond, c.cond_width)
        with seeded_torch(rng.fork("outfit")):
            self.outfit = build_outfitting_unet(c.base_width, c.num_heads, c.d_cond)
        with seeded_torch(rng.fork("denoise")):
            self.denoise = build_denoising_unet(c.base_width, c.num_heads, c.d_cond)

    def psi(self, garments: torch.Tensor, labels) -> torch.Tensor:
        return self.cond(garments, labels)

    def garment_features(self, gz: torch.Tensor, psi: torch.Tensor) -> list[torch.Tensor]:
        return outfit_forward(self.outfit, gz, psi, self.cfg.outfit_timestep)

    def uncond_inputs(self, gz: torch.Tensor, psi: torch.Tensor) -> tuple[list | None, torch.Tensor]:
        """Garment features and psi for the unconditional (all-zero garment latent) branch."""
        psi_u = torch.zeros_like(psi) if self.cfg.drop_psi_with_garment else psi
        if self.cfg.skip_fusion_uncond:
            return None, psi_u
        return self.garment_features(torch.zeros_like(gz), psi_u), psi_u


def _labels_tensor(labels) -> torch.Tensor:
    if torch.is_tensor(labels):
        return labels
    return torch.tensor([label_index(v) for v in labels], dtype=torch.long)


def tryon_latents(
    model: OOTDModel,
    codec,
    sch: NoiseSchedule,
    masked: torch.Tensor,
    garments: torch.Tensor,
    labels,
    cfg: SampleConfig,
    *,
    force_both_branches: bool = False,
) -> torch.Tensor:
    """Sample z0 for a batch of masked humans (Bx3xHxW) and garments.

    The outfitting UNet runs once per branch per image, before the step loop."""
    cfg.validate(sch.T)
    with torch.no_grad():
        xm = codec.encode(masked)
        gz = codec.encode(garments)
        psi = model.psi(garments, _labels_tensor(labels))
        feats_c = model.garment_features(gz, psi)
        feats_u, psi_u = None, psi
        if force_both_branches or cfg.guidance_scale != 1.0:
            feats_u, psi_u = model.uncond_inputs(gz, psi)
        return ddim_sample(
            model.denoise, sch, xm, feats_c, feats_u, psi, cfg,
            psi_uncond=psi_u, force_both_branches=force_both_branches,
        )


def tryon(model, codec, sch, masked, garments, labels, cfg: SampleConfig, **kw) -> torch.Tensor:
    """Like :func:`tryon_latents` but decoded to images in [0, 1]."""
    with torch.no_grad():
        return codec.decode(tryon_latents(model, codec, sch, masked, garments, labels, cfg, **kw))
