import pytest
import torch

from ootdmini.condenc import CondEncoder, label_index, make_psi
from ootdmini.errors import InputError, ShapeError
from ootdmini.synthdata import LABELS, gen_pair


@pytest.fixture(scope="module")
def enc():
    torch.manual_seed(0)
    return CondEncoder(d_cond=32, width=8)


def test_psi_shape_and_determinism(enc):
    g = gen_pair(0, "dress").garment
    a = make_psi(enc, g, "dress")
    assert a.shape == (2, 32)
    assert torch.equal(a, make_psi(enc, g, "dress"))


def test_label_token_depends_only_on_label(enc):
    g1, g2 = gen_pair(0, "upperbody").garment, gen_pair(1, "upperbody").garment
    a, b = make_psi(enc, g1, "upperbody"), make_psi(enc, g2, "upperbody")
    assert torch.equal(a[1], b[1])
    assert not torch.equal(a[0], b[0])
    c = make_psi(enc, g1, "lowerbody")
    assert torch.equal(a[0], c[0]) and not torch.equal(a[1], c[1])


def test_batch_matches_single(enc):
    gs = torch.stack([gen_pair(k, lab).garment for k, lab in enumerate(LABELS)])
    batch = enc(gs, list(LABELS))
    for k, lab in enumerate(LABELS):
        torch.testing.assert_close(batch[k], make_psi(enc, gs[k], lab))


def test_label_index():
    assert [label_index(v) for v in LABELS] == [0, 1, 2]
    assert label_index(2) == 2
    with pytest.raises(InputError):
        label_index("hat")
    with pytest.raises(InputError):
        label_index(3)


def test_shape_errors(enc):
    with pytest.raises(ShapeError):
        make_psi(enc, torch.zeros(1, 3, 64, 48), "dress")
    with pytest.raises(ShapeError):
        enc(torch.zeros(2, 4, 64, 48), [0, 1])


def test_gradients_reach_encoder(enc):
    g = gen_pair(2, "dress").garment.requires_grad_(False)
    make_psi(enc, g, "dress").sum().backward()
    assert enc.garment[0].weight.grad is not None
    assert enc.labels.weight.grad[2].abs().sum() > 0
    assert enc.labels.weight.grad[0].abs().sum() == 0
    enc.zero_grad()
