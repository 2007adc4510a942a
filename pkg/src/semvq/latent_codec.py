"""Codebooks, nearest-codeword quantization and latent-grid assembly.

Latent grids are ``(B, C, H16, W16)`` tensors; index grids are
``(B, H16, W16)`` long tensors where ``-1`` marks a discarded position.
Selection masks are ``(B, K)`` booleans over the row-major flattened grid.
"""

from __future__ import annotations

import struct

import numpy as np
import torch
from torch import nn

DISCARDED = -1


class Codebook(nn.Module):
    """J learnable codewords plus one learnable placeholder codeword."""

    def __init__(self, num_codes: int = 1024, dim: int = 256):
        super().__init__()
        if num_codes < 2:
            raise ValueError("a codebook needs at least two codewords")
        self.num_codes = num_codes
        self.dim = dim
        bound = 1.0 / num_codes
        self.codewords = nn.Parameter(torch.empty(num_codes, dim).uniform_(-bound, bound))
        self.placeholder = nn.Parameter(torch.empty(dim).uniform_(-bound, bound))

    def to_bytes(self) -> bytes:
        """Little-endian ``u32 J, u32 C, f32[J*C] codewords, f32[C] placeholder``."""
        cw = self.codewords.detach().cpu().numpy().astype("<f4")
        ph = self.placeholder.detach().cpu().numpy().astype("<f4")
        return struct.pack("<II", self.num_codes, self.dim) + cw.tobytes() + ph.tobytes()

    def load_bytes(self, blob: bytes) -> None:
        J, C = struct.unpack_from("<II", blob)
        if (J, C) != (self.num_codes, self.dim):
            raise ValueError(f"codebook shape ({J}, {C}) != ({self.num_codes}, {self.dim})")
        expected = 8 + 4 * (J * C + C)
        if len(blob) != expected:
            raise ValueError(f"codebook blob has {len(blob)} bytes, expected {expected}")
        cw = np.frombuffer(blob, dtype="<f4", count=J * C, offset=8).reshape(J, C)
        ph = np.frombuffer(blob, dtype="<f4", count=C, offset=8 + 4 * J * C)
        with torch.no_grad():
            self.codewords.copy_(torch.from_numpy(cw.copy()))
            self.placeholder.copy_(torch.from_numpy(ph.copy()))


def _flatten(z: torch.Tensor) -> torch.Tensor:
    B, C, H, W = z.shape
    return z.permute(0, 2, 3, 1).reshape(B, H * W, C)


def _unflatten(v: torch.Tensor, H: int, W: int) -> torch.Tensor:
    B, K, C = v.shape
    return v.reshape(B, H, W, C).permute(0, 3, 1, 2)


def nearest_codeword(vectors: torch.Tensor, codewords: torch.Tensor, chunk: int = 256) -> torch.Tensor:
    """Index of the codeword at minimum squared L2 distance, lowest index on ties.

    Distances are computed as explicit differences, not via the
    ``|a|^2 - 2ab + |b|^2`` expansion, so exact ties stay exact.
    """
    out = []
    for start in range(0, vectors.shape[0], chunk):
        v = vectors[start:start + chunk]
        d = (v[:, None, :] - codewords[None, :, :]).pow(2).sum(-1)
        out.append(d.argmin(dim=1))
    if not out:
        return torch.zeros(0, dtype=torch.long, device=vectors.device)
    return torch.cat(out)


def quantize(scaled: torch.Tensor, selected: torch.Tensor, book: Codebook):
    """Quantize the selected score-scaled vectors.

    Returns ``(indices, z_q)``: the index grid (``-1`` where not selected) and a
    grid holding the chosen codewords at selected positions, zeros elsewhere.
    ``z_q`` carries gradient to the codewords only.
    """
    if not torch.isfinite(scaled).all():
        raise FloatingPointError("non-finite latent values")
    B, C, H, W = scaled.shape
    flat = _flatten(scaled)
    sel = selected.reshape(B, H * W)
    indices = torch.full((B, H * W), DISCARDED, dtype=torch.long, device=scaled.device)
    picked = nearest_codeword(flat[sel].detach(), book.codewords.detach())
    indices[sel] = picked
    zq_flat = torch.zeros_like(flat)
    zq_flat = zq_flat.index_put((sel.nonzero(as_tuple=True)), book.codewords[picked])
    return indices.reshape(B, H, W), _unflatten(zq_flat, H, W)


def vq_commit_losses(scaled: torch.Tensor, quantized: torch.Tensor, selected: torch.Tensor):
    """Codebook and commitment terms, averaged over the selected vectors.

    ``L_vq = |sg[z'] - z_q|^2`` moves codewords; ``L_commit = |z' - sg[z_q]|^2``
    moves the encoder.
    """
    B, C, H, W = scaled.shape
    sel = selected.reshape(B, H * W)
    zs = _flatten(scaled)[sel]
    zq = _flatten(quantized)[sel]
    n = max(int(sel.sum()), 1)
    l_vq = (zs.detach() - zq).pow(2).sum() / n
    l_commit = (zs - zq.detach()).pow(2).sum() / n
    return l_vq, l_commit


def straight_through(scaled: torch.Tensor, quantized: torch.Tensor) -> torch.Tensor:
    """Forward value exactly ``z_q``; backward identity to ``z'``."""
    return quantized.detach() + (scaled - scaled.detach())


def assemble_latent(indices: torch.Tensor, book: Codebook) -> torch.Tensor:
    """Codewords at non-negative indices, the placeholder at ``-1``."""
    if indices.numel() and (indices.max() >= book.num_codes or indices.min() < DISCARDED):
        raise IndexError(f"index outside [-1, {book.num_codes - 1}]")
    B, H, W = indices.shape
    flat = indices.reshape(B, H * W)
    table = torch.cat([book.codewords, book.placeholder[None]], dim=0)
    lookup = torch.where(flat < 0, torch.full_like(flat, book.num_codes), flat)
    return _unflatten(table[lookup], H, W)


def fill_placeholders(grid: torch.Tensor, selected: torch.Tensor, book: Codebook) -> torch.Tensor:
    """Keep ``grid`` at selected positions, put the placeholder everywhere else."""
    B, C, H, W = grid.shape
    keep = selected.reshape(B, 1, H, W).to(grid.dtype)
    return grid * keep + book.placeholder.view(1, C, 1, 1) * (1 - keep)


class CodeUsage:
    """Exponential moving count of codeword hits, with dead-code restarts.

    Codewords whose moving count falls below ``threshold`` are moved onto
    randomly drawn vectors from the current batch, which keeps a large
    codebook from collapsing onto a handful of entries early in training.
    """

    def __init__(self, book: Codebook, decay: float = 0.9, threshold: float = 0.03, seed: int = 0):
        self.book = book
        self.decay = decay
        self.threshold = threshold
        self.counts = torch.zeros(book.num_codes, dtype=torch.float64)
        self.gen = torch.Generator().manual_seed(seed)

    def update(self, indices: torch.Tensor) -> None:
        hits = torch.bincount(indices[indices >= 0].flatten().cpu(), minlength=self.book.num_codes)
        self.counts.mul_(self.decay).add_(hits.to(torch.float64), alpha=1 - self.decay)

    @torch.no_grad()
    def restart(self, scaled: torch.Tensor, selected: torch.Tensor) -> int:
        """Reassign dead codewords; returns how many were moved."""
        B, C, H, W = scaled.shape
        pool = _flatten(scaled)[selected.reshape(B, H * W)].detach()
        dead = (self.counts < self.threshold).nonzero().flatten()
        n = min(dead.numel(), pool.shape[0])
        if n == 0:
            return 0
        dead = dead[torch.randperm(dead.numel(), generator=self.gen)[:n]]
        src = torch.randperm(pool.shape[0], generator=self.gen)[:n]
        self.book.codewords[dead.to(self.book.codewords.device)] = pool[src].to(self.book.codewords.dtype)
        self.counts[dead] = 1.0
        return n
