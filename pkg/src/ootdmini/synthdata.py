"""Procedural paired try-on data.

A pair consists of a flat garment swatch on white, a "human" canvas already
wearing that garment (the pattern affinely mapped into a label-specific body
region), the binary region mask, the masked human and the label.  Because the
garment is painted onto the body, the outfitted ground truth equals the human
image exactly.

Images are quantized to the 8-bit grid at generation time so that the on-disk
PPM/PGM representation round-trips bitwise.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import CorruptionError, InputError
from .numerics import Rng

LABELS = ("upperbody", "lowerbody", "dress")
HEIGHT, WIDTH = 64, 48
MASK_GRAY = 128 / 255.0
PATTERNS = ("stripes", "checker", "dots")
MANIFEST_VERSION = 1
_SUPERSAMPLE = 3

# Swatch box (height, width) on the garment canvas per label.
_SWATCH_SIZE = {"upperbody": (26, 26), "lowerbody": (30, 20), "dress": (44, 26)}

# Saturated garment / background colors and a few skin tones.  Drawing from
# small palettes keeps the images cheap to encode at 1/8 resolution.
PALETTE = (
    (0.90, 0.20, 0.20),
    (0.20, 0.70, 0.30),
    (0.20, 0.30, 0.85),
    (0.95, 0.85, 0.20),
    (0.60, 0.30, 0.70),
    (0.15, 0.15, 0.20),
    (0.90, 0.90, 0.85),
    (0.30, 0.75, 0.80),
    (0.85, 0.50, 0.20),
    (0.50, 0.50, 0.50),
)
SKIN_TONES = ((0.95, 0.80, 0.65), (0.80, 0.60, 0.45), (0.55, 0.38, 0.28))

# Body geometry lives on a 4-pixel grid: (top choices, height choices, width
# choices) of the garment region per label.
_GEOMETRY = {
    "upperbody": ((16, 20), (20, 24), (24, 32)),
    "lowerbody": ((36, 40), (16, 20), (16, 24)),
    "dress": ((16, 20), (36, 40), (24, 32)),
}


@dataclass
class SamplePair:
    human: torch.Tensor  # 3xHxW in [0, 1]
    garment: torch.Tensor
    mask: torch.Tensor  # HxW bool, True = region to outfit
    masked_human: torch.Tensor
    label: str
    outfitted: torch.Tensor
    params: dict = field(default_factory=dict, compare=False)

    def images(self) -> dict[str, torch.Tensor]:
        return {
            "human": self.human,
            "garment": self.garment,
            "masked": self.masked_human,
            "gt": self.outfitted,
        }


def _pick(rng: Rng, options, exclude=()) -> list[float]:
    choices = [c for c in options if tuple(c) not in exclude]
    return [float(v) for v in choices[int(rng.integers(0, len(choices)))]]


def garment_params(seed: int, label: str) -> dict:
    if label not in LABELS:
        raise InputError(f"unknown garment label {label!r}; expected one of {LABELS}")
    rng = Rng(seed).fork("pair").fork(label).fork("garment")
    color_a = _pick(rng, PALETTE)
    color_b = _pick(rng, PALETTE, exclude={tuple(color_a)})
    sh, sw = _SWATCH_SIZE[label]
    period = float(20.0 + 16.0 * rng.random())
    return {
        "pattern": PATTERNS[int(rng.integers(0, len(PATTERNS)))],
        "color_a": color_a,
        "color_b": color_b,
        "period": period,
        "phase": [float(v) for v in period * rng.random(2)],
        "vertical": bool(rng.integers(0, 2)),
        "swatch": [
            (HEIGHT - sh) // 2 + int(rng.integers(-2, 3)),
            (WIDTH - sw) // 2 + int(rng.integers(-2, 3)),
            sh,
            sw,
        ],
    }


def body_params(seed: int, label: str) -> dict:
    if label not in LABELS:
        raise InputError(f"unknown garment label {label!r}; expected one of {LABELS}")
    rng = Rng(seed).fork("pair").fork(label).fork("body")
    tops, heights, widths = _GEOMETRY[label]
    top = tops[int(rng.integers(0, len(tops)))]
    h = heights[int(rng.integers(0, len(heights)))]
    w = widths[int(rng.integers(0, len(widths)))]
    # grid-aligned center column; the figure (region plus arms, or the
    # 32-pixel shirt for lowerbody) must fit on the canvas
    half = max(w // 2, 12) + 4 if label == "lowerbody" else w // 2 + 4
    lo, hi = -(-half // 4), (WIDTH - half) // 4
    cx = 4 * int(rng.integers(lo, hi + 1))
    background = _pick(rng, PALETTE)
    return {
        "background": background,
        "skin": _pick(rng, SKIN_TONES),
        "outfit_other": _pick(rng, PALETTE, exclude={tuple(background)}),
        "center_col": cx,
        "head_radius": float(5.0 + rng.random()),
        "region": [top, cx - w // 2, h, w],
    }


def pattern_weight(gp: dict, y: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Blend weight towards ``color_b`` at swatch-local coordinates (pixels).
    The patterns are smooth, with no hard edges inside the garment."""
    period = gp["period"]
    py, px = gp["phase"]
    yy, xx = y + py, x + px
    kind = gp["pattern"]
    if kind == "stripes":
        c = xx if gp["vertical"] else yy
        return 0.5 + 0.5 * np.sin(2 * np.pi * c / period)
    if kind == "checker":
        return 0.5 + 0.5 * np.sin(2 * np.pi * yy / period) * np.sin(2 * np.pi * xx / period)
    if kind == "dots":
        dy = np.mod(yy, period) - period / 2
        dx = np.mod(xx, period) - period / 2
        return np.exp(-(dy * dy + dx * dx) / (2 * (0.18 * period) ** 2))
    raise InputError(f"unknown pattern {kind!r}")


def _subsample_grid(r0: float, c0: float, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Supersampled pixel-sample positions for an h x w block at (r0, c0);
    returns arrays of shape (h, w, S*S)."""
    offs = (np.arange(_SUPERSAMPLE) + 0.5) / _SUPERSAMPLE
    oy, ox = np.meshgrid(offs, offs, indexing="ij")
    rows = np.arange(h)[:, None, None] + oy.reshape(1, 1, -1)
    cols = np.arange(w)[None, :, None] + ox.reshape(1, 1, -1)
    return np.broadcast_to(rows + r0, (h, w, oy.size)), np.broadcast_to(cols + c0, (h, w, ox.size))


def render_pattern_block(gp: dict, local_y: np.ndarray, local_x: np.ndarray) -> np.ndarray:
    """Average supersampled pattern colors; inputs are (h, w, S) swatch-local
    coordinates, output is (h, w, 3)."""
    wgt = pattern_weight(gp, local_y, local_x)[..., None]
    a = np.asarray(gp["color_a"])
    b = np.asarray(gp["color_b"])
    return ((1 - wgt) * a + wgt * b).mean(axis=2)


def render_region(gp: dict, region: list[int]) -> np.ndarray:
    """The garment pattern affinely mapped into a body region (h, w, 3)."""
    top, left, h, w = region
    sh, sw = gp["swatch"][2:]
    ys, xs = _subsample_grid(0.0, 0.0, h, w)
    return render_pattern_block(gp, ys * (sh / h), xs * (sw / w))


def _quantize(img: np.ndarray) -> torch.Tensor:
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return _from_u8(q)


def _from_u8(q: np.ndarray) -> torch.Tensor:
    return torch.from_numpy((q.astype(np.float32) / np.float32(255.0)).transpose(2, 0, 1).copy())


def _to_u8(img: torch.Tensor) -> np.ndarray:
    return np.round(img.numpy().transpose(1, 2, 0) * 255.0).astype(np.uint8)


def render_garment(gp: dict) -> np.ndarray:
    canvas = np.ones((HEIGHT, WIDTH, 3))
    top, left, sh, sw = gp["swatch"]
    ys, xs = _subsample_grid(0.0, 0.0, sh, sw)
    canvas[top : top + sh, left : left + sw] = render_pattern_block(gp, ys, xs)
    return canvas


def render_human(gp: dict, bp: dict, label: str) -> tuple[np.ndarray, np.ndarray]:
    canvas = np.empty((HEIGHT, WIDTH, 3))
    canvas[:] = bp["background"]
    skin = np.asarray(bp["skin"])
    other = np.asarray(bp["outfit_other"])
    cx = bp["center_col"]
    top, left, h, w = bp["region"]

    yy, xx = np.mgrid[0:HEIGHT, 0:WIDTH] + 0.5
    head = np.hypot(yy - 8.0, xx - cx) <= bp["head_radius"]
    canvas[head] = skin
    canvas[12:16, cx - 4 : cx + 4] = skin  # neck

    if label == "upperbody":
        canvas[top : top + 16, left - 4 : left] = skin
        canvas[top : top + 16, left + w : left + w + 4] = skin
        canvas[top + h : 60, cx - 8 : cx + 8] = other
    elif label == "lowerbody":
        canvas[16:top, cx - 12 : cx + 12] = other
        canvas[16:32, cx - 16 : cx - 12] = skin
        canvas[16:32, cx + 12 : cx + 16] = skin
    else:
        canvas[top : top + 12, left - 4 : left] = skin
        canvas[top : top + 12, left + w : left + w + 4] = skin
    if label != "upperbody":
        canvas[top + h : 60, cx - 8 : cx - 4] = skin
        canvas[top + h : 60, cx + 4 : cx + 8] = skin

    canvas[top : top + h, left : left + w] = render_region(gp, bp["region"])
    mask = np.zeros((HEIGHT, WIDTH), dtype=bool)
    mask[top : top + h, left : left + w] = True
    return canvas, mask


def mask_human(human: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return torch.where(mask[None], torch.tensor(MASK_GRAY, dtype=human.dtype), human)


def gen_pair(seed: int, label: str, garment_seed: int | None = None) -> SamplePair:
    """Generate one pair.  ``garment_seed`` different from ``seed`` gives the
    unpaired protocol (the swatch and the body pattern then come from another
    garment, and ``outfitted`` is that garment on this body)."""
    gp = garment_params(seed if garment_seed is None else garment_seed, label)
    bp = body_params(seed, label)
    garment = _quantize(render_garment(gp))
    human_np, mask_np = render_human(gp, bp, label)
    human = _quantize(human_np)
    mask = torch.from_numpy(mask_np)
    return SamplePair(
        human=human,
        garment=garment,
        mask=mask,
        masked_human=mask_human(human, mask),
        label=label,
        outfitted=human.clone(),
        params={"seed": seed, "garment": gp, "body": bp},
    )


# -- on-disk dataset ---------------------------------------------------------

_KINDS = ("human", "garment", "masked", "gt")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def pair_id(label: str, index: int) -> str:
    return f"{label}_{index:04d}"


def write_dataset(out_dir: str | Path, n_per_label: int, seed: int) -> dict:
    """Generate ``n_per_label`` pairs per label with seeds ``seed..seed+n-1``."""
    if n_per_label <= 0:
        raise InputError("n_per_label must be positive")
    out = Path(out_dir)
    (out / "imgs").mkdir(parents=True, exist_ok=True)
    entries = []
    for label in LABELS:
        for k in range(n_per_label):
            pid = pair_id(label, k)
            pair = gen_pair(seed + k, label)
            files = {}
            for kind, img in pair.images().items():
                rel = f"imgs/{pid}_{kind}.ppm"
                Image.fromarray(_to_u8(img), mode="RGB").save(out / rel)
                files[kind] = rel
            rel = f"imgs/{pid}_mask.pgm"
            Image.fromarray(pair.mask.numpy().astype(np.uint8) * 255, mode="L").save(out / rel)
            files["mask"] = rel
            entries.append(
                {
                    "id": pid,
                    "label": label,
                    "seed": seed + k,
                    "files": files,
                    "sha256": {kind: _sha256(out / rel) for kind, rel in files.items()},
                }
            )
    manifest = {"version": MANIFEST_VERSION, "height": HEIGHT, "width": WIDTH, "seed": seed, "pairs": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return manifest


def _read_ppm(path: Path) -> torch.Tensor:
    with Image.open(path) as im:
        return _from_u8(np.asarray(im.convert("RGB")))


def read_dataset(data_dir: str | Path) -> tuple[dict, list[SamplePair]]:
    root = Path(data_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise CorruptionError(f"no manifest.json in {root}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("version") != MANIFEST_VERSION:
        raise CorruptionError(f"unsupported manifest version {manifest.get('version')!r}")
    ids = [e["id"] for e in manifest["pairs"]]
    if len(set(ids)) != len(ids):
        raise CorruptionError("duplicate pair ids in manifest")

    pairs = []
    for e in manifest["pairs"]:
        for kind, rel in e["files"].items():
            path = root / rel
            if not path.exists():
                raise CorruptionError(f"pair {e['id']}: missing {kind} file {rel}")
            if _sha256(path) != e["sha256"][kind]:
                raise CorruptionError(f"pair {e['id']}: hash mismatch for {kind} file {rel}")
        imgs = {k: _read_ppm(root / e["files"][k]) for k in _KINDS}
        with Image.open(root / e["files"]["mask"]) as im:
            mask = torch.from_numpy(np.asarray(im.convert("L")) > 127)
        pairs.append(
            SamplePair(
                human=imgs["human"],
                garment=imgs["garment"],
                mask=mask,
                masked_human=imgs["masked"],
                label=e["label"],
                outfitted=imgs["gt"],
                params={"seed": e["seed"], "id": e["id"]},
            )
        )
    return manifest, pairs


def generate_pairs(n_per_label: int, seed: int) -> list[SamplePair]:
    """In-memory equivalent of ``write_dataset`` + ``read_dataset``."""
    return [gen_pair(seed + k, label) for label in LABELS for k in range(n_per_label)]
