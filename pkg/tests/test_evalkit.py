import numpy as np
import pytest
import torch
from PIL import Image

from micro import MICRO_MODEL
from ootdmini.codec import pretrain_codec
from ootdmini.diffusion import SampleConfig
from ootdmini.errors import InputError, ShapeError
from ootdmini.evalkit import (
    ABLATION_HEADER,
    ablation_csv,
    ablation_run,
    attention_attraction,
    default_attention_steps,
    dump_attention_maps,
    evaluate,
    masked_fidelity,
    mask_to_tokens,
    sample_attention,
    ssim,
)
from ootdmini.numerics import Rng
from ootdmini.pipeline import tryon
from ootdmini.synthdata import generate_pairs
from ootdmini.trainer import TrainConfig, init_state

from oracles import naive_ssim

C1 = 0.01**2


def test_ssim_identity():
    x = torch.rand(3, 12, 10, generator=torch.Generator().manual_seed(0))
    assert ssim(x, x) == 1.0


def test_ssim_constant_closed_form():
    a = torch.full((3, 9, 9), 0.4)
    b = torch.full((3, 9, 9), 0.6)
    expected = (2 * 0.4 * 0.6 + C1) / (0.4**2 + 0.6**2 + C1)
    assert ssim(a, b) == pytest.approx(expected, abs=1e-7)
    assert ssim(a, b) == pytest.approx(naive_ssim(a.double().numpy(), b.double().numpy()), abs=1e-9)


def test_ssim_matches_loop_oracle_and_is_symmetric():
    gen = torch.Generator().manual_seed(1)
    a, b = torch.rand(3, 10, 9, generator=gen), torch.rand(3, 10, 9, generator=gen)
    assert ssim(a, b) == pytest.approx(naive_ssim(a.double().numpy(), b.double().numpy()), abs=1e-9)
    assert abs(ssim(a, b) - ssim(b, a)) <= 1e-7


def test_ssim_shape_error():
    with pytest.raises(ShapeError):
        ssim(torch.zeros(3, 8, 8), torch.zeros(3, 8, 9))


def test_masked_fidelity():
    gen = torch.Generator().manual_seed(2)
    gt = torch.rand(3, 6, 5, generator=gen)
    mask = torch.zeros(6, 5, dtype=torch.bool)
    mask[1:4, 2:5] = True
    assert masked_fidelity(gt, gt, mask) == 0.0
    outside = gt.clone()
    outside[:, 0, 0] += 0.5
    assert masked_fidelity(outside, gt, mask) == 0.0
    res = torch.rand(3, 6, 5, generator=gen)
    acc, n = 0.0, 0
    for c in range(3):
        for i in range(6):
            for j in range(5):
                if mask[i, j]:
                    acc += (float(res[c, i, j]) - float(gt[c, i, j])) ** 2
                    n += 1
    assert abs(masked_fidelity(res, gt, mask) - acc / n) <= 1e-7
    with pytest.raises(InputError):
        masked_fidelity(res, gt, torch.zeros(6, 5, dtype=torch.bool))
    with pytest.raises(ShapeError):
        masked_fidelity(res, gt[:, :5], mask)


def test_mask_to_tokens():
    m = torch.zeros(8, 8, dtype=torch.bool)
    m[:4, :] = True
    assert mask_to_tokens(m, 2, 2).tolist() == [True, True, False, False]


def test_default_attention_steps():
    assert default_attention_steps(20) == [1, 10, 20]
    assert default_attention_steps(1) == [1]


@pytest.fixture(scope="module")
def tiny():
    images = [im for p in generate_pairs(1, 31) for im in (p.human, p.garment)]
    codec, _ = pretrain_codec(images, 3, Rng(0), batch_size=4, base=4)
    cfg = TrainConfig(model=MICRO_MODEL, seed=1)
    with_d = init_state(cfg, codec)
    without = init_state(TrainConfig(model=MICRO_MODEL, seed=2, dropout_ratio=0.0), codec)
    return with_d, without, generate_pairs(1, 77)


def test_guidance_one_equals_two_branch(tiny):
    st, _, pairs = tiny
    masked = torch.stack([p.masked_human for p in pairs])
    garments = torch.stack([p.garment for p in pairs])
    labels = [p.label for p in pairs]
    cfg = SampleConfig(4, 1.0, 3)
    one = tryon(st.model, st.codec, st.schedule, masked, garments, labels, cfg)
    both = tryon(st.model, st.codec, st.schedule, masked, garments, labels, cfg, force_both_branches=True)
    assert torch.max(torch.abs(one - both)) <= 1e-6


def test_evaluate_deterministic(tiny):
    st, _, pairs = tiny
    a = evaluate(st.model, st.codec, st.schedule, pairs, SampleConfig(3, 1.5, 0))
    again = evaluate(st.model, st.codec, st.schedule, pairs, SampleConfig(3, 1.5, 0))
    assert a[0] == again[0] and a[1] == again[1]
    # a different batch split only changes float32 conv round-off
    b = evaluate(st.model, st.codec, st.schedule, pairs, SampleConfig(3, 1.5, 0), batch_size=2)
    assert a[0] == pytest.approx(b[0], abs=1e-6) and a[1] == pytest.approx(b[1], abs=1e-6)
    assert a[2].shape == (3, 3, 64, 48)


def test_ablation_rows_and_csv(tiny):
    st, no, pairs = tiny
    grid = (1.0, 2.0, 5.0)
    rows = ablation_run(st, no, pairs, grid, seed=0, sampler_steps=2)
    assert len(rows) == 1 + len(grid)
    assert not rows[0].dropout_enabled and rows[0].s_g == 1.0
    assert [r.s_g for r in rows[1:]] == list(grid)
    assert all(r.n_samples == len(pairs) for r in rows)
    text = ablation_csv(rows).splitlines()
    assert text[0] == ",".join(ABLATION_HEADER)
    assert len(text) == 1 + len(rows)
    with pytest.raises(InputError):
        ablation_run(st, no, [], grid)


def test_attention_dump(tiny, tmp_path):
    st, _, pairs = tiny
    cfg = SampleConfig(5, 1.5, 0)
    files = dump_attention_maps(st.model, st.codec, st.schedule, pairs[0], cfg, tmp_path)
    steps = default_attention_steps(5)
    assert len(files) == st.model.denoise.num_attn_layers * len(steps) * 2
    assert len(list(tmp_path.glob("attn_L*_T*_*.pgm"))) == len(files)
    for f in files:
        arr = np.asarray(Image.open(f))
        assert arr.dtype == np.uint8 and arr.max() == 255


def test_attention_attraction_runs(tiny):
    st, _, pairs = tiny
    captured = sample_attention(st.model, st.codec, st.schedule, pairs, SampleConfig(3, 1.5, 0), steps=[1, 3])
    assert sorted(captured) == [1, 3]
    inside, outside = attention_attraction(captured, pairs)
    assert 0.0 <= inside <= 1.0 and 0.0 <= outside <= 1.0
