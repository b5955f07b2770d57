"""Metrics and experiment harnesses: SSIM, masked MSE, guidance ablation and
attention-map inspection."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .diffusion import NoiseSchedule, SampleConfig, ddim_sample, ddim_timesteps
from .errors import InputError, ShapeError
from .ootdnet import UNet, capture_attention
from .pipeline import OOTDModel, _labels_tensor, tryon
from .synthdata import SamplePair

SSIM_WINDOW = 7
SSIM_K1, SSIM_K2 = 0.01, 0.03
DEFAULT_S_GRID = (1.0, 1.5, 2.0, 2.5, 3.0, 5.0)
ABLATION_HEADER = ["dropout", "s_g", "masked_mse", "ssim", "n"]


def ssim(a: torch.Tensor, b: torch.Tensor, data_range: float = 1.0) -> float:
    """Mean SSIM over channels and valid 7x7 uniform windows (CxHxW inputs)."""
    if a.shape != b.shape:
        raise ShapeError(f"ssim inputs differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    x = a.double()[None] if a.dim() == 3 else a.double()
    y = b.double()[None] if b.dim() == 3 else b.double()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    def win(t):
        return F.avg_pool2d(t, SSIM_WINDOW, stride=1)

    mu_x, mu_y = win(x), win(y)
    var_x = win(x * x) - mu_x * mu_x
    var_y = win(y * y) - mu_y * mu_y
    cov = win(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float((num / den).mean())


def masked_fidelity(result: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor) -> float:
    """MSE over the pixels where ``mask`` is set (all channels)."""
    if result.shape != gt.shape:
        raise ShapeError(f"result {tuple(result.shape)} and ground truth {tuple(gt.shape)} differ")
    m = mask.bool()
    if not m.any():
        raise InputError("empty mask")
    diff = (result.double() - gt.double()) ** 2
    return float(diff[..., m].mean())


@dataclass
class AblationRow:
    dropout_enabled: bool
    s_g: float
    lpips_proxy: float  # masked MSE
    ssim: float
    n_samples: int

    def csv_fields(self) -> list[str]:
        return [str(int(self.dropout_enabled)), f"{self.s_g:g}", f"{self.lpips_proxy:.8f}", f"{self.ssim:.8f}", str(self.n_samples)]


def evaluate(
    model: OOTDModel,
    codec,
    sch: NoiseSchedule,
    pairs: Sequence[SamplePair],
    cfg: SampleConfig,
    batch_size: int = 128,
    **kw,
) -> tuple[float, float, torch.Tensor]:
    """Sample try-on results for ``pairs``; returns (mean masked MSE, mean SSIM, results)."""
    outs = []
    model.eval()
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i : i + batch_size]
        masked = torch.stack([p.masked_human for p in chunk])
        garments = torch.stack([p.garment for p in chunk])
        outs.append(tryon(model, codec, sch, masked, garments, [p.label for p in chunk], cfg, **kw))
    results = torch.cat(outs)
    mse = float(np.mean([masked_fidelity(r, p.outfitted, p.mask) for r, p in zip(results, pairs)]))
    ss = float(np.mean([ssim(r, p.outfitted) for r, p in zip(results, pairs)]))
    return mse, ss, results


def ablation_run(
    with_dropout,
    without_dropout,
    eval_set: Sequence[SamplePair],
    s_grid: Sequence[float] = DEFAULT_S_GRID,
    seed: int = 0,
    sampler_steps: int = 20,
) -> list[AblationRow]:
    """``with_dropout``/``without_dropout`` are trainer states (model, codec,
    schedule).  Every row samples from the same seed."""
    if not eval_set:
        raise InputError("empty evaluation set")
    rows = []
    st = without_dropout
    mse, ss, _ = evaluate(st.model, st.codec, st.schedule, eval_set, SampleConfig(sampler_steps, 1.0, seed))
    rows.append(AblationRow(False, 1.0, mse, ss, len(eval_set)))
    st = with_dropout
    for s in s_grid:
        mse, ss, _ = evaluate(st.model, st.codec, st.schedule, eval_set, SampleConfig(sampler_steps, float(s), seed))
        rows.append(AblationRow(True, float(s), mse, ss, len(eval_set)))
    return rows


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_HEADER)
    for r in rows:
        w.writerow(r.csv_fields())
    return buf.getvalue()


# -- attention inspection -----------------------------------------------------


def default_attention_steps(n_steps: int) -> list[int]:
    """1-based sampler steps {1, mid, last}."""
    return sorted({1, (n_steps + 1) // 2, n_steps})


def sample_attention(
    model: OOTDModel,
    codec,
    sch: NoiseSchedule,
    pairs: Sequence[SamplePair],
    cfg: SampleConfig,
    steps: Sequence[int] | None = None,
) -> dict[int, list[dict]]:
    """Run the sampler on ``pairs`` and record, at the chosen 1-based steps,
    body/garment attention mass of every fused layer (conditional branch)."""
    steps = list(steps or default_attention_steps(cfg.sampler_steps))
    model.eval()
    with torch.no_grad():
        masked = torch.stack([p.masked_human for p in pairs])
        garments = torch.stack([p.garment for p in pairs])
        xm = codec.encode(masked)
        gz = codec.encode(garments)
        psi = model.psi(garments, _labels_tensor([p.label for p in pairs]))
        feats = model.garment_features(gz, psi)
        feats_u, psi_u = model.uncond_inputs(gz, psi) if cfg.guidance_scale != 1.0 else (None, psi)
        captured: dict[int, list[dict]] = {}
        ts = ddim_timesteps(sch.T, cfg.sampler_steps)

        def hook(i, t, zin):
            if i + 1 in steps:
                captured[i + 1] = capture_attention(model.denoise, zin, ts[i], feats, psi)

        ddim_sample(model.denoise, sch, xm, feats, feats_u, psi, cfg, psi_uncond=psi_u, step_callback=hook)
    return captured


def mask_to_tokens(mask: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """Row-major token flags: True where more than half the token's pixels are masked."""
    frac = F.adaptive_avg_pool2d(mask.float()[None, None], (h, w))[0, 0]
    return (frac > 0.5).flatten()


def attention_attraction(
    captured: dict[int, list[dict]], pairs: Sequence[SamplePair], layer: int = UNet.BOTTLENECK
) -> tuple[float, float]:
    """Mean garment-half mass over masked-region queries and over unmasked
    queries at ``layer``, pooled across pairs and recorded steps."""
    inside, outside = [], []
    for maps in captured.values():
        m = maps[layer]
        h, w = m["shape"]
        for b, pair in enumerate(pairs):
            flags = mask_to_tokens(pair.mask, h, w)
            g = m["garment"][b]
            inside.append(g[flags])
            outside.append(g[~flags])
    return float(torch.cat(inside).mean()), float(torch.cat(outside).mean())


def _heatmap(values: torch.Tensor, h: int, w: int) -> np.ndarray:
    v = values.reshape(h, w).double().numpy()
    peak = v.max()
    scaled = v / peak if peak > 0 else np.zeros_like(v)
    return np.round(scaled * 255.0).astype(np.uint8)


def dump_attention_maps(
    model: OOTDModel,
    codec,
    sch: NoiseSchedule,
    pair: SamplePair,
    cfg: SampleConfig,
    out_dir: str | Path,
    steps: Sequence[int] | None = None,
) -> list[Path]:
    """Write ``attn_L<layer>_T<step>_{body,garment}.pgm`` heatmaps, each
    normalized to a peak of 255."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    captured = sample_attention(model, codec, sch, [pair], cfg, steps)
    written = []
    for step, maps in sorted(captured.items()):
        for m in maps:
            h, w = m["shape"]
            for half in ("body", "garment"):
                path = out / f"attn_L{m['layer']}_T{step}_{half}.pgm"
                Image.fromarray(_heatmap(m[half][0], h, w), mode="L").save(path)
                written.append(path)
    return written
