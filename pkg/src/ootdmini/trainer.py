"""Joint training of the conditioning encoder and both UNets with outfitting
dropout, plus the named-tensor checkpoint archive.

Randomness for iteration ``i`` comes from ``Rng(seed).fork("train").fork(i)``
and is split further into batch / timestep / noise / dropout streams.  Nothing
carries over between iterations except parameters and optimizer moments, so a
run resumed from a checkpoint retraces the uninterrupted run exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .codec import Codec, IdentityCodec
from .condenc import label_index
from .diffusion import NoiseSchedule, add_noise, loss_ootd
from .errors import CorruptionError, FormatError, InputError, TrainingError
from .numerics import Rng, normal, uniform
from .ootdnet import denoise_forward, outfit_forward
from .pipeline import ModelConfig, OOTDModel
from .synthdata import SamplePair

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 5e-5
    dropout_ratio: float = 0.10
    batch_size: int = 8
    iterations: int = 8000
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-2
    checkpoint_every: int = 1000
    timesteps: int = 1000
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> None:
        if not 0.0 <= self.dropout_ratio <= 1.0:
            raise InputError(f"dropout_ratio must be in [0, 1], got {self.dropout_ratio}")
        if not self.learning_rate > 0:
            raise InputError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1 or self.iterations < 0:
            raise InputError("batch_size must be >= 1 and iterations >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        model = ModelConfig(**d.pop("model", {}))
        return cls(model=model, **d)


# -- batches -------------------------------------------------------------------


@dataclass
class EncodedBatch:
    """Latents of a set of pairs, computed once with the frozen codec."""

    human: torch.Tensor  # Bx4xhxw, E(x)
    masked: torch.Tensor  # E(x_m)
    garment_latent: torch.Tensor  # E(g)
    garment: torch.Tensor  # Bx3xHxW pixels, input to the psi encoder
    labels: torch.Tensor  # B

    def __len__(self) -> int:
        return self.human.shape[0]

    def select(self, idx) -> EncodedBatch:
        idx = torch.as_tensor(idx)
        return EncodedBatch(self.human[idx], self.masked[idx], self.garment_latent[idx], self.garment[idx], self.labels[idx])


def encode_pairs(codec, pairs: Sequence[SamplePair], chunk: int = 64) -> EncodedBatch:
    if len(pairs) == 0:
        raise InputError("empty batch")
    humans = torch.stack([p.outfitted for p in pairs])
    masked = torch.stack([p.masked_human for p in pairs])
    garments = torch.stack([p.garment for p in pairs])
    labels = torch.tensor([label_index(p.label) for p in pairs], dtype=torch.long)

    def enc(x):
        with torch.no_grad():
            return torch.cat([codec.encode(x[i : i + chunk]) for i in range(0, len(x), chunk)])

    return EncodedBatch(enc(humans), enc(masked), enc(garments), garments, labels)


# -- loss ----------------------------------------------------------------------


def apply_outfitting_dropout(rng: Rng, gz: torch.Tensor, p: float) -> torch.Tensor:
    """Replace the garment latent with all zeros with probability ``p``; a
    batched Bx4xhxw input gets one independent coin per sample."""
    if not 0.0 <= p <= 1.0:
        raise InputError(f"dropout ratio must be in [0, 1], got {p}")
    if gz.dim() == 3:
        return gz * 0 if float(uniform(rng, (1,))[0]) < p else gz
    drop = uniform(rng, (gz.shape[0],)) < p
    return torch.where(drop[:, None, None, None], torch.zeros_like(gz), gz)


def ootd_loss(
    model: OOTDModel,
    sch: NoiseSchedule,
    batch: EncodedBatch,
    t: torch.Tensor,
    eps: torch.Tensor,
    garment_latent: torch.Tensor,
) -> torch.Tensor:
    """Training objective for fixed timesteps, noise and (possibly dropped)
    garment latents."""
    z_noisy = add_noise(sch, batch.human, eps, t)
    psi = model.psi(batch.garment, batch.labels)
    feats = outfit_forward(model.outfit, garment_latent, psi, model.cfg.outfit_timestep)
    zin = torch.cat([batch.masked, z_noisy], dim=1)
    return loss_ootd(denoise_forward(model.denoise, zin, t, feats, psi), eps)


@dataclass
class StepDraws:
    t: torch.Tensor
    eps: torch.Tensor
    garment_latent: torch.Tensor


def draw_step(rng: Rng, sch: NoiseSchedule, batch: EncodedBatch, p: float) -> StepDraws:
    b = len(batch)
    t = torch.from_numpy(rng.fork("timestep").integers(1, sch.T + 1, size=b))
    eps = normal(rng.fork("noise"), tuple(batch.human.shape))
    gz = apply_outfitting_dropout(rng.fork("dropout"), batch.garment_latent, p)
    return StepDraws(t, eps, gz)


# -- state ---------------------------------------------------------------------


@dataclass
class TrainState:
    config: TrainConfig
    model: OOTDModel
    codec: Codec
    optimizer: torch.optim.Optimizer
    schedule: NoiseSchedule
    iteration: int = 0


def make_optimizer(model: OOTDModel, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(
        model.parameters(), lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay
    )


def init_state(cfg: TrainConfig, codec: Codec) -> TrainState:
    cfg.validate()
    model = OOTDModel(cfg.model, Rng(cfg.seed).fork("init"))
    return TrainState(cfg, model, codec, make_optimizer(model, cfg), NoiseSchedule(cfg.timesteps))


def train_step(state: TrainState, batch: EncodedBatch | Sequence[SamplePair], rng: Rng) -> tuple[TrainState, float]:
    if not isinstance(batch, EncodedBatch):
        batch = encode_pairs(state.codec, batch)
    if len(batch) == 0:
        raise InputError("empty batch")
    draws = draw_step(rng, state.schedule, batch, state.config.dropout_ratio)
    state.model.train()
    loss = ootd_loss(state.model, state.schedule, batch, draws.t, draws.eps, draws.garment_latent)
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss.item()} at iteration {state.iteration + 1}")
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    state.iteration += 1
    return state, loss.item()


def iteration_rng(seed: int, iteration: int) -> Rng:
    return Rng(seed).fork("train").fork(iteration)


def train(
    cfg: TrainConfig,
    dataset: EncodedBatch,
    codec: Codec,
    out_dir: str | Path | None = None,
    state: TrainState | None = None,
    stop_at: int | None = None,
) -> tuple[TrainState, list[tuple[int, float, float]]]:
    """Run (or continue, when ``state`` is given) training up to
    ``cfg.iterations`` (or ``stop_at``).  With ``out_dir``, checkpoints are
    written every ``cfg.checkpoint_every`` iterations and at the end, and the
    metrics CSV is appended."""
    if len(dataset) == 0:
        raise InputError("empty training set")
    state = state or init_state(cfg, codec)
    end = cfg.iterations if stop_at is None else min(stop_at, cfg.iterations)
    out = Path(out_dir) if out_dir is not None else None
    metrics: list[tuple[int, float, float]] = []
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.csv"
        fresh = state.iteration == 0 or not metrics_path.exists()
        fh = metrics_path.open("w" if fresh else "a", newline="")
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(["iter", "loss", "seconds"])
    start = time.perf_counter()
    try:
        while state.iteration < end:
            rng = iteration_rng(cfg.seed, state.iteration)
            idx = rng.fork("batch").integers(0, len(dataset), size=cfg.batch_size)
            state, loss = train_step(state, dataset.select(idx), rng)
            elapsed = time.perf_counter() - start
            metrics.append((state.iteration, loss, elapsed))
            if writer is not None:
                writer.writerow([state.iteration, f"{loss:.6g}", f"{elapsed:.3f}"])
            if state.iteration % 500 == 0:
                log.info("iter %d loss %.5f (%.1fs)", state.iteration, loss, elapsed)
            if out is not None and (state.iteration % cfg.checkpoint_every == 0 or state.iteration == end):
                save_checkpoint(out / "checkpoint.ootd", state_to_checkpoint(state))
    finally:
        if writer is not None:
            fh.close()
    return state, metrics


# -- checkpoint archive --------------------------------------------------------

MAGIC = b"OOTDMINI"
VERSION = 1


def _checksum(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def save_checkpoint(path: str | Path, tensors: dict[str, torch.Tensor]) -> None:
    """Write ``tensors`` (name -> float32 tensor) atomically."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        arr = t.detach().to(torch.float32).contiguous().numpy()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    body = b"".join(parts)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(body + struct.pack("<Q", _checksum(body)))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> dict[str, torch.Tensor]:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 8 or data[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: not an OOTDMINI checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", data, len(MAGIC))
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if len(data) < len(MAGIC) + 16:
        raise CorruptionError(f"{path}: truncated checkpoint")
    body, (stored,) = data[:-8], struct.unpack("<Q", data[-8:])
    if _checksum(body) != stored:
        raise CorruptionError(f"{path}: checksum mismatch (truncated or corrupted)")
    pos = len(MAGIC) + 8
    out: dict[str, torch.Tensor] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", body, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            numel = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(body, dtype="<f4", count=numel, offset=pos).reshape(dims)
            pos += 4 * numel
            out[name] = torch.from_numpy(arr.astype(np.float32))
    except (struct.error, ValueError) as exc:
        raise CorruptionError(f"{path}: malformed tensor record ({exc})") from exc
    if pos != len(body):
        raise CorruptionError(f"{path}: {len(body) - pos} trailing bytes")
    return out


def encode_json(obj) -> torch.Tensor:
    return torch.tensor(list(json.dumps(obj, sort_keys=True).encode("utf-8")), dtype=torch.float32)


def decode_json(t: torch.Tensor):
    return json.loads(bytes(int(v) for v in t.tolist()).decode("utf-8"))


def codec_tensors(codec: Codec | IdentityCodec) -> dict[str, torch.Tensor]:
    if isinstance(codec, IdentityCodec):
        return {"codec/meta/identity": torch.ones(1)}
    tensors = {f"codec/{k}": v for k, v in codec.state_dict().items()}
    tensors["codec/meta/base"] = torch.tensor([float(codec.encoder[0].out_channels)])
    return tensors


def codec_from_tensors(tensors: dict[str, torch.Tensor]) -> Codec | IdentityCodec:
    if "codec/meta/identity" in tensors:
        return IdentityCodec()
    if "codec/meta/base" not in tensors:
        raise FormatError("archive holds no codec")
    base = int(tensors["codec/meta/base"][0])
    codec = Codec(base)
    codec.load_state_dict({k[len("codec/") :]: v for k, v in tensors.items() if k.startswith("codec/") and "/meta/" not in k})
    return codec.freeze()


def state_to_checkpoint(state: TrainState) -> dict[str, torch.Tensor]:
    tensors = codec_tensors(state.codec)
    for prefix, module in (("cond", state.model.cond), ("outfit", state.model.outfit), ("denoise", state.model.denoise)):
        tensors.update({f"{prefix}/{k}": v for k, v in module.state_dict().items()})
    opt = state.optimizer.state_dict()
    for idx, st in sorted(opt["state"].items()):
        for key, val in st.items():
            tensors[f"optim/{idx}/{key}"] = torch.as_tensor(val, dtype=torch.float32)
    tensors["meta/iteration"] = torch.tensor([float(state.iteration)])
    tensors["meta/config_json"] = encode_json(state.config.to_dict())
    return tensors


def state_from_checkpoint(tensors: dict[str, torch.Tensor]) -> TrainState:
    cfg = TrainConfig.from_dict(decode_json(tensors["meta/config_json"]))
    codec = codec_from_tensors(tensors)
    model = OOTDModel(cfg.model, Rng(cfg.seed).fork("init"))
    for prefix, module in (("cond", model.cond), ("outfit", model.outfit), ("denoise", model.denoise)):
        module.load_state_dict({k[len(prefix) + 1 :]: v for k, v in tensors.items() if k.startswith(prefix + "/")})
    optimizer = make_optimizer(model, cfg)
    opt_state = optimizer.state_dict()
    per_param: dict[int, dict] = {}
    for name, val in tensors.items():
        if name.startswith("optim/"):
            _, idx, key = name.split("/", 2)
            per_param.setdefault(int(idx), {})[key] = val.reshape(()) if key == "step" else val.clone()
    opt_state["state"] = per_param
    optimizer.load_state_dict(opt_state)
    return TrainState(cfg, model, codec, optimizer, NoiseSchedule(cfg.timesteps), int(tensors["meta/iteration"][0]))


def params_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in module.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().contiguous().numpy().tobytes())
    return h.hexdigest()
