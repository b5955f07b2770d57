"""Outfitting UNet, denoising UNet and outfitting fusion.

Both networks share one architecture (two resolution levels, a transformer
block per stage with spatial self-attention followed by cross-attention to
psi).  The outfitting UNet runs once on the garment latent and we keep the
normalized input of each of its self-attention layers.  The denoising UNet
concatenates its own self-attention input with the matching garment feature
map along the width axis, attends over the doubled token set and keeps only
the queries that belong to its own (left) half.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import FusionError, ShapeError

LATENT_CHANNELS = 4


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int
    base_width: int = 32
    num_heads: int = 4
    d_cond: int = 64
    out_channels: int = LATENT_CHANNELS


def _gn(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(max(1, min(8, ch // 4)), ch)


def fuse_concat(xn: torch.Tensor, gn: torch.Tensor, layer: int | None = None) -> torch.Tensor:
    """Concatenate body and garment feature maps along width: (.., c, h, 2w)."""
    if xn.shape != gn.shape:
        raise FusionError(f"cannot fuse body features {tuple(xn.shape)} with garment features {tuple(gn.shape)}", layer)
    return torch.cat([xn, gn], dim=-1)


def _to_tokens(m: torch.Tensor) -> torch.Tensor:
    return m.flatten(2).transpose(1, 2)


def _to_map(tokens: torch.Tensor, h: int, w: int) -> torch.Tensor:
    return tokens.transpose(1, 2).reshape(tokens.shape[0], -1, h, w)


class FusedSelfAttention(nn.Module):
    def __init__(self, ch: int, heads: int, index: int = -1):
        super().__init__()
        if ch % heads:
            raise ShapeError(f"channels {ch} not divisible by {heads} heads")
        self.heads = heads
        self.index = index
        self.to_q = nn.Linear(ch, ch, bias=False)
        self.to_k = nn.Linear(ch, ch, bias=False)
        self.to_v = nn.Linear(ch, ch, bias=False)
        self.to_out = nn.Linear(ch, ch)

    def _split(self, t: torch.Tensor) -> torch.Tensor:
        b, n, c = t.shape
        return t.reshape(b, n, self.heads, c // self.heads).transpose(1, 2)

    def forward(self, xn: torch.Tensor, gn: torch.Tensor | None = None, return_weights: bool = False):
        """``xn``/``gn``: Bxcxhxw.  Returns the Bxcxhxw output (and the head-
        averaged attention weights B x hw x keys when requested)."""
        b, c, h, w = xn.shape
        queries = _to_tokens(xn)
        # Keys/values come from the width-concatenated map, flattened row-major.
        # Only left-half queries are computed: that is the crop.
        kv = queries if gn is None else _to_tokens(fuse_concat(xn, gn, self.index))
        q, k, v = self._split(self.to_q(queries)), self._split(self.to_k(kv)), self._split(self.to_v(kv))
        scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        weights = scores.softmax(dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(b, h * w, c)
        out = _to_map(self.to_out(out), h, w)
        if return_weights:
            return out, weights.mean(dim=1)
        return out


def self_attention_fused(layer: FusedSelfAttention, xn: torch.Tensor, gn: torch.Tensor | None = None) -> torch.Tensor:
    """Self-attention over ``xn`` alone, or over ``xn`` (c) ``gn`` cropped back to
    ``xn``'s shape.  Accepts cxhxw or Bxcxhxw."""
    squeeze = xn.dim() == 3
    if squeeze:
        xn = xn[None]
        gn = None if gn is None else gn[None]
    out = layer(xn, gn)
    return out[0] if squeeze else out


class CrossAttention(nn.Module):
    def __init__(self, ch: int, d_cond: int, heads: int):
        super().__init__()
        self.heads = heads
        self.to_q = nn.Linear(ch, ch, bias=False)
        self.to_k = nn.Linear(d_cond, ch, bias=False)
        self.to_v = nn.Linear(d_cond, ch, bias=False)
        self.to_out = nn.Linear(ch, ch)

    def forward(self, x: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        b, n, c = x.shape
        hd = c // self.heads

        def split(t):
            return t.reshape(b, t.shape[1], self.heads, hd).transpose(1, 2)

        q, k, v = split(self.to_q(x)), split(self.to_k(ctx)), split(self.to_v(ctx))
        w = (q @ k.transpose(-1, -2) / math.sqrt(hd)).softmax(dim=-1)
        return self.to_out((w @ v).transpose(1, 2).reshape(b, n, c))


@dataclass
class _Trace:
    """Side channel for one forward pass."""

    feats: list | None = None  # garment features to fuse, per layer
    inputs: list = field(default_factory=list)  # captured self-attention inputs
    weights: list | None = None  # captured attention weights (fused pass)


class TransformerBlock(nn.Module):
    def __init__(self, ch: int, heads: int, d_cond: int, index: int):
        super().__init__()
        self.index = index
        self.norm1 = nn.LayerNorm(ch)
        self.attn1 = FusedSelfAttention(ch, heads, index)
        self.norm2 = nn.LayerNorm(ch)
        self.attn2 = CrossAttention(ch, d_cond, heads)
        self.norm3 = nn.LayerNorm(ch)
        self.ff = nn.Sequential(nn.Linear(ch, 4 * ch), nn.GELU(), nn.Linear(4 * ch, ch))

    def forward(self, x: torch.Tensor, psi: torch.Tensor, trace: _Trace) -> torch.Tensor:
        b, c, h, w = x.shape
        tokens = _to_tokens(x)
        n1 = _to_map(self.norm1(tokens), h, w)
        trace.inputs.append(n1)
        gn = None if trace.feats is None else trace.feats[self.index]
        if trace.weights is not None:
            a, weights = self.attn1(n1, gn, return_weights=True)
            trace.weights.append(weights)
        else:
            a = self.attn1(n1, gn)
        tokens = tokens + _to_tokens(a)
        tokens = tokens + self.attn2(self.norm2(tokens), psi)
        tokens = tokens + self.ff(self.norm3(tokens))
        return _to_map(tokens, h, w)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb: int):
        super().__init__()
        self.norm1 = _gn(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb, cout)
        self.norm2 = _gn(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Identity() if cin == cout else nn.Conv2d(cin, cout, 1)

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.to(torch.float32)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class UNet(nn.Module):
    """Two-level UNet: enc1, enc2, mid, dec2, dec1 stages, one transformer
    block each (so five self-attention layers)."""

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        c1, c2 = cfg.base_width, 2 * cfg.base_width
        temb = 4 * cfg.base_width
        heads, dc = cfg.num_heads, cfg.d_cond
        self.time_mlp = nn.Sequential(nn.Linear(c1, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.conv_in = nn.Conv2d(cfg.in_channels, c1, 3, padding=1)
        self.enc1 = ResBlock(c1, c1, temb)
        self.down = nn.Conv2d(c1, c1, 3, stride=2, padding=1)
        self.enc2 = ResBlock(c1, c2, temb)
        self.mid1 = ResBlock(c2, c2, temb)
        self.mid2 = ResBlock(c2, c2, temb)
        self.dec2 = ResBlock(2 * c2, c2, temb)
        self.up = nn.Conv2d(c2, c2, 3, padding=1)
        self.dec1 = ResBlock(c2 + c1, c1, temb)
        self.blocks = nn.ModuleList(TransformerBlock(c, heads, dc, i) for i, c in enumerate([c1, c2, c2, c2, c1]))
        self.norm_out = _gn(c1)
        self.conv_out = nn.Conv2d(c1, cfg.out_channels, 3, padding=1)
        self.num_attn_layers = len(self.blocks)
        assert self.num_attn_layers == 5

    # index of the bottleneck self-attention layer
    BOTTLENECK = 2

    def attn_shapes(self, h: int, w: int) -> list[tuple[int, int, int]]:
        c1, c2 = self.cfg.base_width, 2 * self.cfg.base_width
        h2, w2 = (h + 1) // 2, (w + 1) // 2
        return [(c1, h, w), (c2, h2, w2), (c2, h2, w2), (c2, h2, w2), (c1, h, w)]

    def forward(self, z: torch.Tensor, t, psi: torch.Tensor, trace: _Trace | None = None) -> torch.Tensor:
        trace = trace or _Trace()
        b = z.shape[0]
        t = torch.as_tensor(t)
        if t.dim() == 0:
            t = t.expand(b)
        temb = self.time_mlp(timestep_embedding(t, self.cfg.base_width).to(z.dtype))
        h1 = self.conv_in(z)
        h1 = self.blocks[0](self.enc1(h1, temb), psi, trace)
        h2 = self.blocks[1](self.enc2(self.down(h1), temb), psi, trace)
        m = self.blocks[2](self.mid1(h2, temb), psi, trace)
        m = self.mid2(m, temb)
        d2 = self.blocks[3](self.dec2(torch.cat([m, h2], 1), temb), psi, trace)
        up = self.up(F.interpolate(d2, size=h1.shape[-2:], mode="nearest"))
        d1 = self.blocks[4](self.dec1(torch.cat([up, h1], 1), temb), psi, trace)
        return self.conv_out(F.silu(self.norm_out(d1)))


def build_outfitting_unet(base_width: int = 32, num_heads: int = 4, d_cond: int = 64) -> UNet:
    return UNet(UNetConfig(LATENT_CHANNELS, base_width, num_heads, d_cond))


def build_denoising_unet(base_width: int = 32, num_heads: int = 4, d_cond: int = 64) -> UNet:
    """Denoising UNet with 8 input channels [masked-person latent; noisy latent].
    The masked-person input channels start at exactly zero."""
    net = UNet(UNetConfig(2 * LATENT_CHANNELS, base_width, num_heads, d_cond))
    with torch.no_grad():
        net.conv_in.weight[:, :LATENT_CHANNELS].zero_()
    return net


def _batched(z: torch.Tensor, channels: int, what: str) -> tuple[torch.Tensor, bool]:
    if z.dim() == 3:
        z, squeeze = z[None], True
    else:
        squeeze = False
    if z.dim() != 4 or z.shape[1] != channels:
        raise ShapeError(f"{what} must have {channels} channels, got shape {tuple(z.shape)}")
    return z, squeeze


def _psi_batch(psi: torch.Tensor, b: int) -> torch.Tensor:
    if psi.dim() == 2:
        psi = psi[None]
    return psi.expand(b, -1, -1) if psi.shape[0] != b else psi


def outfit_forward(w: UNet, gz: torch.Tensor, psi: torch.Tensor, t: int = 0) -> list[torch.Tensor]:
    """Single forward pass of the outfitting UNet; returns the input to each
    self-attention layer in forward order (batched Bxcxhxw)."""
    z, _ = _batched(gz, LATENT_CHANNELS, "garment latent")
    trace = _Trace()
    w(z, t, _psi_batch(psi, z.shape[0]), trace)
    if len(trace.inputs) != w.num_attn_layers:
        raise FusionError(f"expected {w.num_attn_layers} self-attention inputs, captured {len(trace.inputs)}")
    return trace.inputs


def _check_feats(e: UNet, z: torch.Tensor, feats: list[torch.Tensor]) -> None:
    if len(feats) != e.num_attn_layers:
        raise FusionError(f"garment feature stack has {len(feats)} maps, model has {e.num_attn_layers} self-attention layers")
    for i, (g, (c, h, w)) in enumerate(zip(feats, e.attn_shapes(*z.shape[-2:]))):
        if tuple(g.shape[-3:]) != (c, h, w) or (g.dim() == 4 and g.shape[0] not in (1, z.shape[0])):
            raise FusionError(f"garment features {tuple(g.shape)} do not match expected {(c, h, w)}", i)


def _expand_feats(feats: list[torch.Tensor], b: int) -> list[torch.Tensor]:
    out = []
    for g in feats:
        g = g if g.dim() == 4 else g[None]
        out.append(g.expand(b, -1, -1, -1) if g.shape[0] != b else g)
    return out


def denoise_forward(
    e: UNet, zin: torch.Tensor, t, feats: list[torch.Tensor] | None, psi: torch.Tensor
) -> torch.Tensor:
    """Noise prediction for the noisy half of ``zin`` (8xhxw or Bx8xhxw)."""
    z, squeeze = _batched(zin, 2 * LATENT_CHANNELS, "denoiser input")
    b = z.shape[0]
    trace = _Trace()
    if feats is not None:
        _check_feats(e, z, feats)
        trace.feats = _expand_feats(feats, b)
    out = e(z, t, _psi_batch(psi, b), trace)
    return out[0] if squeeze else out


def capture_attention(
    e: UNet, zin: torch.Tensor, t, feats: list[torch.Tensor], psi: torch.Tensor
) -> list[dict]:
    """Per fused layer: body-half and garment-half attention mass per query
    token (each B x h*w), plus the layer's (h, w)."""
    z, _ = _batched(zin, 2 * LATENT_CHANNELS, "denoiser input")
    b = z.shape[0]
    _check_feats(e, z, feats)
    trace = _Trace(feats=_expand_feats(feats, b), weights=[])
    e(z, t, _psi_batch(psi, b), trace)
    maps = []
    for i, ((_, h, w), weights) in enumerate(zip(e.attn_shapes(*z.shape[-2:]), trace.weights)):
        # keys are the row-major tokens of the h x 2w concatenated map
        key_cols = torch.arange(2 * w).repeat(h)
        body = weights[..., key_cols < w].sum(-1)
        garment = weights[..., key_cols >= w].sum(-1)
        maps.append({"layer": i, "shape": (h, w), "body": body, "garment": garment})
    return maps
