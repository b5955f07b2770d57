import dataclasses

import numpy as np
import pytest
import torch

from micro import MICRO_MODEL, finite_difference_check, joint_loss, micro_setup, relative_error
from ootdmini.codec import IdentityCodec, pretrain_codec
from ootdmini.diffusion import NoiseSchedule, add_noise, loss_ootd
from ootdmini.errors import CorruptionError, FormatError, InputError
from ootdmini.numerics import Rng, normal
from ootdmini.ootdnet import denoise_forward, outfit_forward
from ootdmini.synthdata import generate_pairs
from ootdmini.trainer import (
    TrainConfig,
    apply_outfitting_dropout,
    draw_step,
    encode_pairs,
    init_state,
    load_checkpoint,
    ootd_loss,
    params_hash,
    save_checkpoint,
    state_from_checkpoint,
    state_to_checkpoint,
    train,
    train_step,
)


@pytest.fixture(scope="module")
def codec():
    images = [im for p in generate_pairs(2, 900) for im in (p.human, p.garment)]
    c, _ = pretrain_codec(images, 5, Rng(3), batch_size=4, base=4)
    return c


@pytest.fixture(scope="module")
def data(codec):
    return encode_pairs(codec, generate_pairs(2, 100))


def _cfg(**kw):
    base = dict(batch_size=3, iterations=6, seed=4, learning_rate=1e-3, model=MICRO_MODEL, checkpoint_every=3)
    base.update(kw)
    return TrainConfig(**base)


def test_dropout_rate_and_independence():
    gz = torch.ones(10_000, 4, 1, 1)
    out = apply_outfitting_dropout(Rng(0), gz, 0.1)
    dropped = (out.flatten(1) == 0).all(1)
    kept = (out.flatten(1) == 1).all(1)
    assert bool((dropped | kept).all())
    assert 0.09 <= dropped.float().mean().item() <= 0.11


def test_dropout_extremes_and_errors():
    gz = normal(Rng(1), [5, 4, 2, 2])
    assert torch.equal(apply_outfitting_dropout(Rng(2), gz, 0.0), gz)
    assert torch.equal(apply_outfitting_dropout(Rng(2), gz, 1.0), torch.zeros_like(gz))
    assert torch.equal(apply_outfitting_dropout(Rng(2), gz[0], 1.0), torch.zeros_like(gz[0]))
    with pytest.raises(InputError):
        apply_outfitting_dropout(Rng(2), gz, 1.5)


def test_dropout_is_per_sample():
    gz = torch.ones(64, 4, 2, 2)
    out = apply_outfitting_dropout(Rng(9), gz, 0.5)
    frac = (out.flatten(1) == 0).all(1).float().mean().item()
    assert 0.0 < frac < 1.0


def test_gradient_check_micro():
    codec, model, imgs, labels, eps, t, keep = micro_setup(seed=1)
    params = [("codec." + n, p) for n, p in codec.named_parameters()] + list(model.named_parameters())
    res = finite_difference_check(params, lambda: joint_loss(codec, model, imgs, labels, eps, t, keep), 32, seed=1)
    worst = max(res, key=lambda r: relative_error(r[1], r[2]))
    assert relative_error(worst[1], worst[2]) < 1e-3, worst


def test_p_one_equals_all_zero_latent(codec, data):
    state = init_state(_cfg(dropout_ratio=1.0), codec)
    batch = data.select([0, 1, 2])
    rng = Rng(5)
    draws = draw_step(rng, state.schedule, batch, 1.0)
    assert torch.equal(draws.garment_latent, torch.zeros_like(batch.garment_latent))
    a = ootd_loss(state.model, state.schedule, batch, draws.t, draws.eps, draws.garment_latent)
    b = ootd_loss(state.model, state.schedule, batch, draws.t, draws.eps, torch.zeros_like(batch.garment_latent))
    assert a.item() == b.item()


def test_unconditional_reduction(codec, data):
    """p=0 with the garment latent forced to zeros: the per-sample loss equals
    a reference computation of the plain (unconditioned-on-garment) loss."""
    state = init_state(_cfg(dropout_ratio=0.0), codec)
    model, sch = state.model, state.schedule
    for i in range(3):
        batch = data.select([i])
        t = torch.tensor([int(Rng(i).integers(1, 1001))])
        eps = normal(Rng(i).fork("e"), tuple(batch.human.shape))
        got = ootd_loss(model, sch, batch, t, eps, torch.zeros_like(batch.garment_latent)).item()
        # reference path, step by step
        a, s = np.sqrt(sch.alpha_bars[int(t)]), np.sqrt(1 - sch.alpha_bars[int(t)])
        z_noisy = batch.human * float(a) + eps * float(s)
        psi = model.cond(batch.garment, batch.labels)
        null_feats = outfit_forward(model.outfit, torch.zeros(1, 4, 8, 6), psi)
        pred = denoise_forward(model.denoise, torch.cat([batch.masked, z_noisy], 1), t, null_feats, psi)
        ref = ((pred - eps) ** 2).mean().item()
        assert abs(got - ref) <= 1e-6


def test_train_step_updates_all_modules_and_not_codec(codec, data):
    state = init_state(_cfg(), codec)
    before = {k: params_hash(getattr(state.model, k)) for k in ("cond", "outfit", "denoise")}
    codec_before = params_hash(codec)
    state, loss = train_step(state, data.select([0, 1, 2]), Rng(0))
    assert np.isfinite(loss) and state.iteration == 1
    for k, h in before.items():
        assert params_hash(getattr(state.model, k)) != h, k
    assert params_hash(codec) == codec_before


def test_train_step_accepts_pairs(codec):
    state = init_state(_cfg(), codec)
    state, loss = train_step(state, generate_pairs(1, 3), Rng(0))
    assert np.isfinite(loss)


def test_training_deterministic_and_resumable(codec, data, tmp_path):
    full, m_full = train(_cfg(), data, codec, out_dir=tmp_path / "a")
    again, _ = train(_cfg(), data, codec)
    assert params_hash(full.model) == params_hash(again.model)

    half, _ = train(_cfg(), data, codec, out_dir=tmp_path / "b", stop_at=3)
    resumed = state_from_checkpoint(load_checkpoint(tmp_path / "b" / "checkpoint.ootd"))
    assert resumed.iteration == 3
    resumed, m_rest = train(resumed.config, data, resumed.codec, out_dir=tmp_path / "b", state=resumed)
    assert resumed.iteration == 6
    assert params_hash(resumed.model) == params_hash(full.model)
    assert [round(m[1], 12) for m in m_rest] == [round(m[1], 12) for m in m_full[3:]]
    lines = (tmp_path / "b" / "metrics.csv").read_text().splitlines()
    assert lines[0] == "iter,loss,seconds" and len(lines) == 7


def test_checkpoint_round_trip(codec, data, tmp_path):
    state, _ = train(_cfg(iterations=2), data, codec)
    tensors = state_to_checkpoint(state)
    save_checkpoint(tmp_path / "c.ootd", tensors)
    loaded = load_checkpoint(tmp_path / "c.ootd")
    assert list(loaded) == list(tensors)
    assert all(torch.equal(loaded[k], tensors[k].float()) for k in tensors)
    restored = state_from_checkpoint(loaded)
    assert params_hash(restored.model) == params_hash(state.model)
    assert params_hash(restored.codec) == params_hash(codec)
    assert restored.config == state.config
    save_checkpoint(tmp_path / "d.ootd", state_to_checkpoint(restored))
    assert (tmp_path / "c.ootd").read_bytes() == (tmp_path / "d.ootd").read_bytes()


def test_identity_codec_checkpoint(data, tmp_path):
    ident = IdentityCodec()
    state = init_state(_cfg(), ident)
    save_checkpoint(tmp_path / "i.ootd", state_to_checkpoint(state))
    assert isinstance(state_from_checkpoint(load_checkpoint(tmp_path / "i.ootd")).codec, IdentityCodec)


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "x.ootd"
    save_checkpoint(path, {"a": torch.arange(6.0).reshape(2, 3), "b": torch.tensor(1.5)})
    data = path.read_bytes()
    loaded = load_checkpoint(path)
    assert loaded["a"].shape == (2, 3) and loaded["b"].shape == ()
    (tmp_path / "bad.ootd").write_bytes(b"NOTOOTD!" + data[8:])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "bad.ootd")
    (tmp_path / "ver.ootd").write_bytes(data[:8] + (99).to_bytes(4, "little") + data[12:])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "ver.ootd")
    (tmp_path / "trunc.ootd").write_bytes(data[:-5])
    with pytest.raises(CorruptionError):
        load_checkpoint(tmp_path / "trunc.ootd")
    flipped = bytearray(data)
    flipped[30] ^= 1
    (tmp_path / "flip.ootd").write_bytes(bytes(flipped))
    with pytest.raises(CorruptionError):
        load_checkpoint(tmp_path / "flip.ootd")
    assert not list(tmp_path.glob("*.tmp"))


def test_config_validation_and_round_trip():
    cfg = _cfg()
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(InputError):
        _cfg(dropout_ratio=-0.1).validate()
    with pytest.raises(InputError):
        _cfg(learning_rate=0.0).validate()


def test_empty_dataset(codec, data):
    with pytest.raises(InputError):
        train(_cfg(), data.select(torch.tensor([], dtype=torch.long)), codec)


def test_overfit_smoke(codec, data):
    """A few dozen iterations on one pair reduce the loss."""
    one = data.select([0])
    cfg = _cfg(batch_size=4, iterations=60, learning_rate=3e-3)
    state, metrics = train(cfg, one, codec)
    first = np.mean([m[1] for m in metrics[:10]])
    last = np.mean([m[1] for m in metrics[-10:]])
    assert last < first
