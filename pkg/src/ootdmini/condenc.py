"""Auxiliary conditioning psi = [garment token; label token].

A small conv encoder embeds the garment image into one token and a 3-row
table embeds the garment label.  Both UNets read psi through cross-attention.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .errors import InputError, ShapeError
from .synthdata import LABELS

D_COND = 64


def label_index(label: str | int) -> int:
    if isinstance(label, int):
        if not 0 <= label < len(LABELS):
            raise InputError(f"label index out of range: {label}")
        return label
    try:
        return LABELS.index(label)
    except ValueError:
        raise InputError(f"unknown garment label {label!r}; expected one of {LABELS}") from None


class CondEncoder(nn.Module):
    def __init__(self, d_cond: int = D_COND, width: int = 16):
        super().__init__()
        self.d_cond = d_cond
        self.garment = nn.Sequential(
            nn.Conv2d(3, width, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(2 * width, 4 * width, 3, stride=2, padding=1),
            nn.SiLU(),
        )
        self.proj = nn.Linear(4 * width, d_cond)
        self.labels = nn.Embedding(len(LABELS), d_cond)

    def forward(self, g: torch.Tensor, y) -> torch.Tensor:
        """``g``: Bx3xHxW garments, ``y``: B label indices -> Bx2xd_cond."""
        if g.dim() != 4 or g.shape[1] != 3:
            raise ShapeError(f"garment batch must be Bx3xHxW, got {tuple(g.shape)}")
        if not torch.is_tensor(y):
            y = torch.tensor([label_index(v) for v in y], dtype=torch.long)
        garment_tok = self.proj(self.garment(g).mean(dim=(2, 3)))
        return torch.stack([garment_tok, self.labels(y)], dim=1)


def make_psi(p: CondEncoder, g: torch.Tensor, y: str | int) -> torch.Tensor:
    """Single garment image and label -> 2 x d_cond embedding."""
    if g.dim() != 3:
        raise ShapeError(f"garment must be 3xHxW, got {tuple(g.shape)}")
    return p(g[None], [label_index(y)])[0]
