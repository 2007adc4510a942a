"""Encoders, de-masking module, decoders and discriminators of the codec.

Two pipelines share one layout.  The semantic pipeline encodes the one-hot
map, masks and quantizes its latent grid, fills the gaps with the de-masking
module and decodes class scores.  The image pipeline adds a semantic
positional encoding of the map to its input features and decodes through
SPADE-conditioned blocks.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .latent_codec import Codebook, assemble_latent, fill_placeholders, quantize, straight_through, vq_commit_losses
from .layers import Attention, FeedForward, Norm, ResBlock, SPADE
from .samm import MaskScorer, SemanticMaskScorer, scale_selected, select_topn
from .semantic_map import onehot_torch


@dataclass
class ModelConfig:
    n_classes: int = 19
    latent_channels: int = 256
    codebook_size: int = 1024
    base_channels: int = 64
    pe_channels: int = 128
    spade_hidden: int = 128
    scorer_hidden: int = 64
    attn_heads: int = 1
    adm_layers: int = 2
    disc_channels: int = 64
    semantic_scorer: bool = True

    @property
    def widths(self) -> list[int]:
        return [min(self.base_channels * 2**i, self.latent_channels) for i in range(4)]

    def to_dict(self) -> dict:
        return asdict(self)


def desk_config(**overrides) -> ModelConfig:
    """A narrow configuration that trains in minutes on one CPU core."""
    cfg = dict(latent_channels=64, base_channels=16, pe_channels=32, spade_hidden=16,
               scorer_hidden=32, disc_channels=16)
    cfg.update(overrides)
    return ModelConfig(**cfg)


def check_divisible(t: torch.Tensor) -> None:
    H, W = t.shape[-2:]
    if H % 16 or W % 16:
        raise ValueError(f"H and W must be divisible by 16, got {H}x{W}")


class Encoder(nn.Module):
    """Four (ResBlock, ResBlock, 2x average pool) stages, then self-attention."""

    def __init__(self, in_channels: int, cfg: ModelConfig):
        super().__init__()
        w = cfg.widths
        self.conv_in = nn.Conv2d(in_channels, w[0], 3, padding=1)
        blocks = []
        cin = w[0]
        for cout in w:
            blocks += [ResBlock(cin, cout), ResBlock(cout, cout), nn.AvgPool2d(2)]
            cin = cout
        self.blocks = nn.Sequential(*blocks)
        self.norm_out = Norm(cin)
        self.conv_out = nn.Conv2d(cin, cfg.latent_channels, 1)
        self.attn = Attention(cfg.latent_channels, cfg.attn_heads)

    def forward(self, x):
        check_divisible(x)
        h = self.blocks(self.conv_in(x))
        h = self.conv_out(F.leaky_relu(self.norm_out(h), 0.2))
        return self.attn(h)


class Decoder(nn.Module):
    """Self-attention, then four (ResBlock, ResBlock, 2x nearest copy) stages.

    With ``cond_channels`` set every normalization is a SPADE block driven by
    the semantic map.
    """

    def __init__(self, out_channels: int, cfg: ModelConfig, cond_channels: int | None = None):
        super().__init__()
        self.attn = Attention(cfg.latent_channels, cfg.attn_heads)
        self.blocks = nn.ModuleList()
        cin = cfg.latent_channels
        for cout in reversed(cfg.widths):
            self.blocks.append(ResBlock(cin, cout, cond_channels, cfg.spade_hidden))
            self.blocks.append(ResBlock(cout, cout, cond_channels, cfg.spade_hidden))
            cin = cout
        self.norm_out = Norm(cin) if cond_channels is None else SPADE(cin, cond_channels, cfg.spade_hidden)
        self.conv_out = nn.Conv2d(cin, out_channels, 3, padding=1)

    def forward(self, z, cond=None):
        h = self.attn(z)
        for i, block in enumerate(self.blocks):
            h = block(h, cond)
            if i % 2 == 1:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
        return self.conv_out(F.leaky_relu(self.norm_out(h, cond), 0.2))


class DeMasker(nn.Module):
    """Direction-constrained attention stack.

    Every query attends only to positions that hold a real codeword, so real
    positions never read from placeholder positions while placeholders are
    filled from the real ones.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        C = cfg.latent_channels
        # small but non-zero so placeholders read from real positions from the start
        self.attn = nn.ModuleList(Attention(C, cfg.attn_heads, init_scale=0.01) for _ in range(cfg.adm_layers))
        self.ff = nn.ModuleList(FeedForward(C) for _ in range(cfg.adm_layers))

    def forward(self, assembled: torch.Tensor, real: torch.Tensor) -> torch.Tensor:
        """``real`` is a (B, K) bool mask, or an index grid (``>= 0`` is real)."""
        if real.dtype != torch.bool:
            real = real.reshape(real.shape[0], -1) >= 0
        h = assembled
        for attn, ff in zip(self.attn, self.ff):
            h = ff(attn(h, key_mask=real))
        return h


class Discriminator(nn.Module):
    """(conv 4x4/2, batch norm, leaky ReLU) x 3 and a final conv to one channel."""

    def __init__(self, in_channels: int, width: int = 64):
        super().__init__()
        layers = []
        cin = in_channels
        for i in range(3):
            cout = width * 2**i
            layers += [nn.Conv2d(cin, cout, 4, stride=2, padding=1), nn.BatchNorm2d(cout), nn.LeakyReLU(0.2)]
            cin = cout
        layers.append(nn.Conv2d(cin, 1, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def patch_logits(self, x):
        return self.net(x)

    def forward(self, x):
        """One pre-sigmoid logit per sample (mean of the patch map)."""
        return self.net(x).mean(dim=(1, 2, 3))


class _Pipeline(nn.Module):
    """Masking, quantization and de-masking shared by both generators."""

    def _init_bottleneck(self, cfg: ModelConfig):
        C = cfg.latent_channels
        if cfg.semantic_scorer:
            self.scorer = SemanticMaskScorer(C, cfg.n_classes, cfg.scorer_hidden, cfg.spade_hidden)
        else:
            self.scorer = MaskScorer(C, cfg.scorer_hidden)
        self.codebook = Codebook(cfg.codebook_size, C)
        self.demask = DeMasker(cfg)

    def bottleneck(self, z, s, m):
        alpha = self.scorer(z, s)
        sel = select_topn(alpha, m)
        scaled = scale_selected(z, sel)
        indices, zq = quantize(scaled, sel.selected, self.codebook)
        l_vq, l_commit = vq_commit_losses(scaled, zq, sel.selected)
        assembled = fill_placeholders(straight_through(scaled, zq), sel.selected, self.codebook)
        z_hat = self.demask(assembled, sel.selected)
        return dict(z=z, alpha=alpha, selection=sel, scaled=scaled, indices=indices, zq=zq,
                    assembled=assembled, z_hat=z_hat, l_vq=l_vq, l_commit=l_commit)

    def indices_from(self, z, s, m):
        sel = select_topn(self.scorer(z, s), m)
        indices, _ = quantize(scale_selected(z, sel), sel.selected, self.codebook)
        return indices

    def latent_from(self, indices):
        return self.demask(assemble_latent(indices, self.codebook), indices)


class SemanticGenerator(_Pipeline):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg.n_classes, cfg)
        self._init_bottleneck(cfg)
        self.decoder = Decoder(cfg.n_classes, cfg)

    def forward(self, s: torch.Tensor, m: float) -> dict:
        out = self.bottleneck(self.encoder(s), s, m)
        out["logits"] = self.decoder(out["z_hat"])
        return out

    def encode(self, s, m):
        return self.indices_from(self.encoder(s), s, m)

    def decode(self, indices):
        """Class logits from an index grid."""
        return self.decoder(self.latent_from(indices))


class ImageGenerator(_Pipeline):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.input_net = nn.Conv2d(3, cfg.pe_channels, 3, padding=1)
        self.sem_pe = nn.Sequential(
            nn.Conv2d(cfg.n_classes, cfg.pe_channels, 3, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(cfg.pe_channels, cfg.pe_channels, 3, padding=1),
        )
        self.encoder = Encoder(cfg.pe_channels, cfg)
        self._init_bottleneck(cfg)
        self.decoder = Decoder(3, cfg, cond_channels=cfg.n_classes)

    def embed(self, x, s):
        if x.shape[-2:] != s.shape[-2:]:
            raise ValueError(f"image {tuple(x.shape[-2:])} and map {tuple(s.shape[-2:])} are misaligned")
        return self.input_net(x) + self.sem_pe(s)

    def forward(self, x, s, s_cond, m) -> dict:
        out = self.bottleneck(self.encoder(self.embed(x, s)), s, m)
        out["x_hat"] = self.render(out["z_hat"], s_cond)
        return out

    def render(self, z_hat, s_cond):
        return torch.sigmoid(self.decoder(z_hat, s_cond))

    def encode(self, x, s, m):
        return self.indices_from(self.encoder(self.embed(x, s)), s, m)

    def decode(self, indices, s_cond):
        return self.render(self.latent_from(indices), s_cond)


class Codec(nn.Module):
    """Both generators plus the two training discriminators."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        self.gs = SemanticGenerator(cfg)
        self.gx = ImageGenerator(cfg)
        self.disc_s = Discriminator(cfg.n_classes, cfg.disc_channels)
        self.disc_x = Discriminator(3, cfg.disc_channels)

    @torch.no_grad()
    def encode(self, x, s, m_x, m_s):
        """Index grids ``(ix, is)`` for images (B, 3, H, W) and one-hot maps."""
        return self.gx.encode(x, s, m_x), self.gs.encode(s, m_s)

    @torch.no_grad()
    def decode(self, ix, is_):
        """Reconstructed image in [0, 1] and label map (B, H, W)."""
        logits = self.gs.decode(is_)
        labels = logits.argmax(dim=1)
        s_hat = onehot_torch(labels, self.cfg.n_classes).to(logits.dtype)
        return self.gx.decode(ix, s_hat), labels


def encode_semantic(s: torch.Tensor, gen: SemanticGenerator) -> torch.Tensor:
    return gen.encoder(s)


def encode_image(x: torch.Tensor, s: torch.Tensor, gen: ImageGenerator) -> torch.Tensor:
    return gen.encoder(gen.embed(x, s))


def demask(assembled: torch.Tensor, indices: torch.Tensor, module: DeMasker) -> torch.Tensor:
    return module(assembled, indices)


def decode_semantic(z: torch.Tensor, gen: SemanticGenerator):
    """``(probabilities, labels)`` from a de-masked latent grid."""
    probs = gen.decoder(z).softmax(dim=1)
    return probs, probs.argmax(dim=1)


def decode_image(z: torch.Tensor, s_cond: torch.Tensor, gen: ImageGenerator) -> torch.Tensor:
    return gen.render(z, s_cond)


def discriminate(x: torch.Tensor, disc: Discriminator) -> torch.Tensor:
    return disc(x)
