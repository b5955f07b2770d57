"""Deterministic, splittable random streams and small tensor helpers.

Every random draw in the package goes through :class:`Rng`.  Streams are
identified by a 64-bit seed plus a path of string labels; ``fork`` appends a
label, so e.g. ``rng.fork("iter7").fork("dropout")`` is independent of
``rng.fork("iter7").fork("noise")`` and both are reproducible on their own.
"""

from __future__ import annotations

import contextlib
import hashlib
from typing import Iterator, Sequence

import numpy as np
import torch

from .errors import RangeError, ShapeError

_MASK64 = (1 << 64) - 1


def _label_words(label: str) -> list[int]:
    digest = hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest()
    value = int.from_bytes(digest, "little")
    return [value & 0xFFFFFFFF, value >> 32]


class Rng:
    """Counter-based (Philox) random stream addressed by ``(seed, path)``."""

    def __init__(self, seed: int, path: Sequence[str] = ()):
        self.seed = int(seed) & _MASK64
        self.path = tuple(path)
        entropy = [self.seed & 0xFFFFFFFF, self.seed >> 32]
        for label in self.path:
            entropy.extend(_label_words(label))
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def fork(self, label: str | int) -> Rng:
        return Rng(self.seed, self.path + (str(label),))

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        """Uniform integers in ``[low, high)``."""
        return self._gen.integers(low, high, size=size)

    def random(self, size=None) -> np.ndarray:
        return self._gen.random(size)

    def torch_seed(self) -> int:
        return int(self._gen.integers(0, 2**63 - 1))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={'/'.join(self.path) or '<root>'})"


def _check_dims(shape: Sequence[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in shape)
    if not dims or any(d <= 0 for d in dims):
        raise ShapeError(f"all dimensions must be positive, got {list(shape)}")
    return dims


def normal(rng: Rng, shape: Sequence[int]) -> torch.Tensor:
    """I.i.d. standard-normal float32 tensor."""
    dims = _check_dims(shape)
    return torch.from_numpy(rng._gen.standard_normal(dims, dtype=np.float32))


def uniform(rng: Rng, shape: Sequence[int], lo: float = 0.0, hi: float = 1.0) -> torch.Tensor:
    """I.i.d. float32 draws from ``[lo, hi)``."""
    if not lo < hi:
        raise RangeError(f"need lo < hi, got lo={lo}, hi={hi}")
    dims = _check_dims(shape)
    u = rng._gen.random(dims, dtype=np.float32)
    out = np.float32(lo) + u * np.float32(hi - lo)
    # float32 rounding can land exactly on hi
    top = np.nextafter(np.float32(hi), np.float32(lo), dtype=np.float32)
    return torch.from_numpy(np.minimum(out, top).astype(np.float32))


@contextlib.contextmanager
def seeded_torch(rng: Rng) -> Iterator[None]:
    """Run a block (typically module construction) with torch's global RNG
    seeded from ``rng`` and restored afterwards."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(rng.torch_seed())
        yield


def assert_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise FloatingPointError(f"non-finite values in {what}")
    return t
