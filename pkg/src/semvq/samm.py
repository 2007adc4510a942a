"""Relevance scoring and top-N selection of latent vectors.

``SemanticMaskScorer`` conditions its normalization layers on the
(16x-downsampled) semantic map through SPADE; ``MaskScorer`` is the
unconditioned baseline with the same trunk.  Both map a latent grid to one
score in [0, 1] per position.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .layers import SPADE, plain_norm


@dataclass
class MaskSelection:
    scores: torch.Tensor  # (B, K) in [0, 1]
    selected: torch.Tensor  # (B, K) bool
    m: float

    @property
    def n_selected(self) -> int:
        return int(self.selected[0].sum())

    def positions(self, b: int = 0) -> list[int]:
        return self.selected[b].nonzero().flatten().tolist()


def n_keep(m: float, K: int) -> int:
    """``max(1, floor(m K))`` for a masking fraction in (0, 1]."""
    if not 0.0 < m <= 1.0:
        raise ValueError(f"masking fraction must lie in (0, 1], got {m}")
    # nudge guards against 0.35 * 20 = 6.999999... style rounding
    return max(1, min(K, math.floor(m * K + 1e-9)))


def select_topn(scores: torch.Tensor, m: float) -> MaskSelection:
    """Keep the ``max(1, floor(mK))`` highest scores per row.

    Ties go to the lowest (row-major) position, so the kept set for a smaller
    ``m`` is always a subset of the kept set for a larger one.
    """
    squeeze = scores.dim() == 1
    if squeeze:
        scores = scores[None]
    B, K = scores.shape
    n = n_keep(m, K)
    order = torch.sort(scores.detach(), dim=1, descending=True, stable=True).indices
    selected = torch.zeros(B, K, dtype=torch.bool, device=scores.device)
    selected.scatter_(1, order[:, :n], True)
    if squeeze:
        scores, selected = scores[0], selected[0]
    return MaskSelection(scores, selected, m)


def scale_selected(z: torch.Tensor, sel: MaskSelection) -> torch.Tensor:
    """``alpha_k z_k`` at selected positions, zero at dropped ones."""
    B, C, H, W = z.shape
    weight = (sel.scores * sel.selected.to(sel.scores.dtype)).reshape(B, 1, H, W)
    return z * weight


class MaskScorer(nn.Module):
    """Unconditioned scorer: (conv, norm, leaky ReLU) x 2, 1x1 head, sigmoid."""

    def __init__(self, channels: int = 256, hidden: int = 64):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, hidden, 3, padding=1)
        self.norm1 = plain_norm(hidden)
        self.conv2 = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.norm2 = plain_norm(hidden)
        self.head = nn.Conv2d(hidden, 1, 1)

    def _normalize(self, i, h, s):
        return getattr(self, f"norm{i}")(h)

    def forward(self, z: torch.Tensor, s: torch.Tensor | None = None) -> torch.Tensor:
        h = F.leaky_relu(self._normalize(1, self.conv1(z), s), 0.2)
        h = F.leaky_relu(self._normalize(2, self.conv2(h), s), 0.2)
        return torch.sigmoid(self.head(h)).flatten(1)


class SemanticMaskScorer(MaskScorer):
    """Scorer whose normalizations are SPADE blocks driven by the semantic map."""

    def __init__(self, channels: int = 256, n_classes: int = 19, hidden: int = 64, spade_hidden: int = 64):
        super().__init__(channels, hidden)
        self.spade1 = SPADE(hidden, n_classes, spade_hidden)
        self.spade2 = SPADE(hidden, n_classes, spade_hidden)

    def _normalize(self, i, h, s):
        if s is None:
            raise ValueError("semantic scorer needs the semantic map")
        if s.shape[-2] != 16 * h.shape[-2] or s.shape[-1] != 16 * h.shape[-1]:
            raise ValueError(f"semantic map {tuple(s.shape[-2:])} does not match latent grid {tuple(h.shape[-2:])}")
        return getattr(self, f"spade{i}")(h, s)


def score(z: torch.Tensor, s: torch.Tensor, scorer: MaskScorer) -> torch.Tensor:
    return scorer(z, s)
