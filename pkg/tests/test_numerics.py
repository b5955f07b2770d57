import numpy as np
import pytest
import torch

from ootdmini.errors import RangeError, ShapeError
from ootdmini.numerics import Rng, normal, uniform


def test_normal_deterministic():
    a = normal(Rng(7), [2, 2])
    b = normal(Rng(7), [2, 2])
    assert a.dtype == torch.float32
    assert torch.equal(a, b)


def test_normal_mean_and_std_large_sample():
    x = normal(Rng(3), [1_000_000]).double()
    assert abs(x.mean().item()) < 0.01
    assert abs(x.std().item() - 1.0) < 0.01


@pytest.mark.parametrize("shape", [[0], [2, -1], []])
def test_normal_bad_shape(shape):
    with pytest.raises(ShapeError):
        normal(Rng(0), shape)


def test_uniform_mean_and_range():
    x = uniform(Rng(11), [1_000_000], 0.0, 1.0)
    assert abs(x.double().mean().item() - 0.5) < 0.01
    assert x.min() >= 0.0 and x.max() < 1.0


def test_uniform_respects_bounds_and_is_deterministic():
    a = uniform(Rng(5), [1000], -2.0, 3.0)
    assert torch.equal(a, uniform(Rng(5), [1000], -2.0, 3.0))
    assert a.min() >= -2.0 and a.max() < 3.0


@pytest.mark.parametrize("lo,hi", [(1.0, 1.0), (2.0, 1.0)])
def test_uniform_range_error(lo, hi):
    with pytest.raises(RangeError):
        uniform(Rng(0), [3], lo, hi)


def test_forked_streams_are_reproducible_and_distinct():
    root = Rng(42)
    a = normal(root.fork("noise"), [64])
    assert torch.equal(a, normal(Rng(42).fork("noise"), [64]))
    assert not torch.equal(a, normal(root.fork("dropout"), [64]))
    assert not torch.equal(a, normal(Rng(43).fork("noise"), [64]))
    # forking does not consume from the parent
    assert torch.equal(normal(root, [4]), normal(Rng(42), [4]))


def test_forked_streams_uncorrelated():
    a = normal(Rng(1).fork("a"), [100_000]).double().numpy()
    b = normal(Rng(1).fork("b"), [100_000]).double().numpy()
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.02


def test_seed_is_64_bit():
    big = 2**64 - 1
    assert torch.equal(normal(Rng(big), [3]), normal(Rng(big), [3]))
    assert not torch.equal(normal(Rng(big), [3]), normal(Rng(big - 1), [3]))
