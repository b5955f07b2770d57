"""Desk-scale outfitting latent diffusion for virtual try-on.

An outfitting UNet encodes the garment latent once; its self-attention inputs
are fused into the denoising UNet's self-attention layers.  Outfitting dropout
during training enables garment classifier-free guidance at sampling time.
"""

__version__ = "0.1.0"
