"""Command-line entry point: ``ootdmini <subcommand> ...``.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import codec as codec_mod
from . import evalkit, synthdata, trainer
from .diffusion import SampleConfig
from .errors import CorruptionError, FormatError, FusionError, InputError, RangeError, ShapeError, TrainingError
from .numerics import Rng
from .pipeline import ModelConfig, tryon

log = logging.getLogger("ootdmini")

EVAL_SEED = 1_000_000


def _guidance(text: str) -> float:
    v = float(text)
    if not v >= 1.0:
        raise argparse.ArgumentTypeError(f"guidance scale must be >= 1, got {v}")
    return v


def _positive_int(text: str) -> int:
    v = int(text)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {v}")
    return v


def _probability(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"must be in [0, 1], got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="ootdmini", description=__doc__, formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic paired dataset", formatter_class=fmt)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--n", type=_positive_int, default=16, help="pairs per garment label")
    g.add_argument("--seed", type=int, default=0, help="first pair seed")

    c = sub.add_parser("pretrain-codec", help="train and freeze the latent autoencoder", formatter_class=fmt)
    c.add_argument("--data", required=True, nargs="+", help="dataset directories (all images are used)")
    c.add_argument("--out", required=True, help="output directory (codec.ootd, codec_curve.csv)")
    c.add_argument("--steps", type=_positive_int, default=codec_mod.DEFAULT_STEPS, help="optimizer steps")
    c.add_argument("--batch-size", type=_positive_int, default=16, help="images per step")
    c.add_argument("--lr", type=float, default=codec_mod.DEFAULT_LR, help="Adam learning rate (one-cycle peak)")
    c.add_argument("--seed", type=int, default=0, help="RNG seed")

    d = trainer.TrainConfig()
    m = ModelConfig()
    t = sub.add_parser("train", help="jointly train the outfitting and denoising UNets", formatter_class=fmt)
    t.add_argument("--data", required=True, help="training dataset directory")
    src = t.add_mutually_exclusive_group(required=True)
    src.add_argument("--codec", help="codec archive from pretrain-codec")
    src.add_argument("--identity-codec", action="store_true", help="debug only: diffusion at pixel resolution")
    t.add_argument("--out", required=True, help="output directory (checkpoint.ootd, metrics.csv)")
    t.add_argument("--resume", help="continue from this checkpoint")
    t.add_argument("--iterations", type=int, default=d.iterations, help="training iterations")
    t.add_argument("--lr", type=float, default=d.learning_rate, help="AdamW learning rate (fixed)")
    t.add_argument("--dropout", type=_probability, default=d.dropout_ratio, help="outfitting dropout ratio")
    t.add_argument("--batch-size", type=_positive_int, default=d.batch_size, help="pairs per iteration")
    t.add_argument("--weight-decay", type=float, default=d.weight_decay, help="AdamW weight decay")
    t.add_argument("--checkpoint-every", type=_positive_int, default=d.checkpoint_every, help="checkpoint interval in iterations")
    t.add_argument("--seed", type=int, default=d.seed, help="RNG seed")
    t.add_argument("--base-width", type=_positive_int, default=m.base_width, help="UNet base channel width")
    t.add_argument("--outfit-timestep", type=int, default=m.outfit_timestep, help="timestep of the single outfitting pass")
    t.add_argument("--drop-psi-with-garment", action="store_true", help="null psi in the unconditional branch too")
    t.add_argument("--skip-fusion-uncond", action="store_true", help="unconditional branch without fusion")

    s = sub.add_parser("sample", help="generate one try-on result", formatter_class=fmt)
    _sampling_args(s)
    s.add_argument("--human-id", required=True, help="pair id providing the masked human")
    s.add_argument("--garment-id", help="pair id providing the garment (default: same as --human-id)")

    a = sub.add_parser("ablate", help="guidance-scale / outfitting-dropout ablation", formatter_class=fmt)
    a.add_argument("--with-dropout", required=True, help="checkpoint trained with outfitting dropout")
    a.add_argument("--without-dropout", required=True, help="checkpoint trained without outfitting dropout")
    a.add_argument("--eval-data", help="held-out dataset dir (default: generate 24/label from a disjoint seed range)")
    a.add_argument("--eval-n", type=_positive_int, default=24, help="pairs per label when generating the eval set")
    a.add_argument("--sg", type=_guidance, nargs="+", default=list(evalkit.DEFAULT_S_GRID), help="guidance scales for the dropout model")
    a.add_argument("--steps", type=_positive_int, default=20, help="DDIM steps")
    a.add_argument("--seed", type=int, default=0, help="sampling seed")
    a.add_argument("--out", required=True)

    i = sub.add_parser("inspect-attn", help="dump fused attention maps", formatter_class=fmt)
    _sampling_args(i)
    i.add_argument("--id", required=True, help="pair id")
    i.add_argument("--at-steps", type=_positive_int, nargs="+", help="1-based sampler steps (default: first, mid, last)")
    return p


def _sampling_args(s: argparse.ArgumentParser) -> None:
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True, help="dataset directory holding the pair ids")
    s.add_argument("--sg", type=_guidance, default=1.5, help="guidance scale (>= 1)")
    s.add_argument("--steps", type=_positive_int, default=20, help="DDIM steps")
    s.add_argument("--seed", type=int, default=0, help="sampling seed")
    s.add_argument("--out", required=True)


def _file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_images(dirs) -> list[torch.Tensor]:
    imgs = []
    for d in dirs:
        _, pairs = synthdata.read_dataset(d)
        for pair in pairs:
            imgs.extend([pair.human, pair.garment, pair.masked_human])
    return imgs


def _pairs_by_id(data_dir) -> dict[str, synthdata.SamplePair]:
    _, pairs = synthdata.read_dataset(data_dir)
    return {p.params["id"]: p for p in pairs}


def _load_state(path) -> trainer.TrainState:
    return trainer.state_from_checkpoint(trainer.load_checkpoint(path))


def _save_ppm(img: torch.Tensor, path: Path) -> None:
    arr = np.round(img.numpy().transpose(1, 2, 0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def cmd_gen_data(args) -> None:
    manifest = synthdata.write_dataset(args.out, args.n, args.seed)
    print(f"wrote {len(manifest['pairs'])} pairs to {args.out}")


def cmd_pretrain_codec(args) -> None:
    imgs = _load_images(args.data)
    codec, curve = codec_mod.pretrain_codec(imgs, args.steps, Rng(args.seed).fork("codec"), batch_size=args.batch_size, lr=args.lr)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tensors = trainer.codec_tensors(codec)
    tensors["meta/config_json"] = trainer.encode_json({"steps": args.steps, "batch_size": args.batch_size, "lr": args.lr, "seed": args.seed})
    trainer.save_checkpoint(out / "codec.ootd", tensors)
    with open(out / "codec_curve.csv", "w") as fh:
        fh.write("step,loss\n")
        fh.writelines(f"{s},{l:.6g}\n" for s, l in curve)
    print(f"codec trained on {len(imgs)} images; final loss {curve[-1][1]:.6f}")


def cmd_train(args) -> None:
    _, pairs = synthdata.read_dataset(args.data)
    if args.resume:
        state = _load_state(args.resume)
        cfg = state.config
        cfg.iterations = args.iterations
        codec = state.codec
    else:
        if args.identity_codec:
            codec = codec_mod.IdentityCodec()
        else:
            codec = trainer.codec_from_tensors(trainer.load_checkpoint(args.codec))
        cfg = trainer.TrainConfig(
            learning_rate=args.lr,
            dropout_ratio=args.dropout,
            batch_size=args.batch_size,
            iterations=args.iterations,
            seed=args.seed,
            weight_decay=args.weight_decay,
            checkpoint_every=args.checkpoint_every,
            model=ModelConfig(
                base_width=args.base_width,
                outfit_timestep=args.outfit_timestep,
                drop_psi_with_garment=args.drop_psi_with_garment,
                skip_fusion_uncond=args.skip_fusion_uncond,
            ),
        )
        state = None
    print("train config: " + json.dumps(cfg.to_dict(), sort_keys=True))
    data = trainer.encode_pairs(codec, pairs)
    state, metrics = trainer.train(cfg, data, codec, args.out, state=state)
    last = metrics[-1][1] if metrics else float("nan")
    print(f"finished at iteration {state.iteration}; last loss {last:.5f}")


def cmd_sample(args) -> None:
    state = _load_state(args.checkpoint)
    pairs = _pairs_by_id(args.data)
    gid = args.garment_id or args.human_id
    for pid in (args.human_id, gid):
        if pid not in pairs:
            raise InputError(f"pair id {pid!r} not in {args.data}")
    human, garment = pairs[args.human_id], pairs[gid]
    cfg = SampleConfig(args.steps, args.sg, args.seed)
    t0 = time.perf_counter()
    result = tryon(state.model.eval(), state.codec, state.schedule, human.masked_human[None], garment.garment[None], [garment.label], cfg)[0]
    wall = time.perf_counter() - t0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _save_ppm(result, out / "result.ppm")
    meta = {
        "sample_config": cfg.to_dict(),
        "seed": args.seed,
        "human_id": args.human_id,
        "garment_id": gid,
        "setting": "paired" if gid == args.human_id else "unpaired",
        "checkpoint": str(args.checkpoint),
        "checkpoint_sha256": _file_hash(args.checkpoint),
        "wall_seconds": wall,
    }
    if gid == args.human_id:
        meta["ssim"] = evalkit.ssim(result, human.outfitted)
        meta["masked_mse"] = evalkit.masked_fidelity(result, human.outfitted, human.mask)
    (out / "meta.json").write_text(json.dumps(meta, indent=2))
    print(f"wrote {out / 'result.ppm'}")


def cmd_ablate(args) -> None:
    with_d = _load_state(args.with_dropout)
    without_d = _load_state(args.without_dropout)
    if args.eval_data:
        _, eval_set = synthdata.read_dataset(args.eval_data)
    else:
        eval_set = synthdata.generate_pairs(args.eval_n, EVAL_SEED)
    rows = evalkit.ablation_run(with_d, without_d, eval_set, args.sg, args.seed, args.steps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    text = evalkit.ablation_csv(rows)
    (out / "ablation.csv").write_text(text)
    print(text, end="")


def cmd_inspect_attn(args) -> None:
    state = _load_state(args.checkpoint)
    pairs = _pairs_by_id(args.data)
    if args.id not in pairs:
        raise InputError(f"pair id {args.id!r} not in {args.data}")
    cfg = SampleConfig(args.steps, args.sg, args.seed)
    files = evalkit.dump_attention_maps(state.model, state.codec, state.schedule, pairs[args.id], cfg, args.out, args.at_steps)
    print(f"wrote {len(files)} attention maps to {args.out}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain-codec": cmd_pretrain_codec,
    "train": cmd_train,
    "sample": cmd_sample,
    "ablate": cmd_ablate,
    "inspect-attn": cmd_inspect_attn,
}

_RUNTIME_ERRORS = (OSError, CorruptionError, FormatError, FusionError, InputError, RangeError, ShapeError, TrainingError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s")
    print("resolved config: " + json.dumps(vars(args), sort_keys=True))
    try:
        COMMANDS[args.command](args)
    except _RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
