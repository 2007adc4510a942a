"""Training objectives for both pipelines.

All functions take batched tensors: one-hot maps ``(B, n_c, H, W)``, images
``(B, 3, H, W)``.  Class weights come from a :class:`ClassTable` column or a
``(n_c,)`` tensor.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .semantic_map import ClassTable, class_weights


@dataclass
class LossWeights:
    gan: float = 1.0
    vq: float = 1.0
    commit: float = 0.25

    def __post_init__(self):
        for name in ("gan", "vq", "commit"):
            v = getattr(self, name)
            if not (v >= 0 and v < float("inf")):
                raise ValueError(f"lambda_{name} must be finite and non-negative, got {v}")


def _weights(table, which, like):
    if isinstance(table, ClassTable):
        return class_weights(table, which, like)
    return torch.as_tensor(table, dtype=like.dtype, device=like.device)


def pixel_weights(s: torch.Tensor, table, which: str) -> torch.Tensor:
    """(B, H, W) weight of each pixel's class; ``s`` is one-hot."""
    w = _weights(table, which, s)
    return torch.einsum("bchw,c->bhw", s, w)


def weighted_ce(s: torch.Tensor, scores: torch.Tensor, table, *, from_logits: bool = False,
                reduction: str = "sum") -> torch.Tensor:
    """``-sum w_{s(h,w)} log(s(h,w) . s_hat(h,w))`` (natural log).

    ``scores`` are per-pixel class probabilities, or logits with
    ``from_logits=True``.  ``reduction="mean"`` divides by the number of
    pixels; either way the result is averaged over the batch.
    """
    if from_logits:
        logp = F.log_softmax(scores, dim=1)
    else:
        sums = scores.sum(dim=1)
        if (scores < 0).any() or not torch.allclose(sums, torch.ones_like(sums), atol=1e-4):
            raise ValueError("scores are not per-pixel probability distributions")
        logp = torch.log(scores.clamp_min(torch.finfo(scores.dtype).tiny))
    nll = -(s * logp).sum(dim=1)
    per_pixel = pixel_weights(s, table, "wce") * nll
    total = per_pixel.flatten(1).sum(1)
    if reduction == "mean":
        total = total / per_pixel[0].numel()
    return total.mean()


def weighted_l2(x: torch.Tensor, x_hat: torch.Tensor, s: torch.Tensor, table) -> torch.Tensor:
    """``(1/HW) sum w_{s(h,w)} |x(h,w) - x_hat(h,w)|^2``, averaged over the batch."""
    w = pixel_weights(s, table, "l2")
    err = (x - x_hat).pow(2).sum(dim=1)
    return (w * err).flatten(1).mean(1).mean()


def residual_edit(x: torch.Tensor, x_hat: torch.Tensor, s: torch.Tensor, table) -> torch.Tensor:
    """``x_hat + w_rel * (x - x_hat)`` with the per-pixel weight broadcast over RGB."""
    w = pixel_weights(s, table, "rel")[:, None]
    return x_hat + w * (x - x_hat)


def adversarial_terms(d_real: torch.Tensor, d_fake: torch.Tensor):
    """Discriminator and non-saturating generator losses from logits.

    ``L_disc = -[log sig(d_real) + log(1 - sig(d_fake))]``,
    ``L_gen = -log sig(d_fake)``; both averaged over the batch.
    """
    l_disc = (F.softplus(-d_real) + F.softplus(d_fake)).mean()
    l_gen = F.softplus(-d_fake).mean()
    return l_disc, l_gen


class FeatureNet(nn.Module):
    """Small frozen convolutional feature extractor with random weights.

    Four stride-2 3x3 convolutions with leaky ReLU.  Weights are drawn from a
    private generator so a given ``seed`` always builds the same network.
    """

    def __init__(self, widths=(16, 32, 64, 64), seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.convs = nn.ModuleList()
        cin = 3
        for cout in widths:
            conv = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
            bound = (6.0 / (cin * 9)) ** 0.5
            with torch.no_grad():
                conv.weight.copy_(torch.rand(conv.weight.shape, generator=gen) * 2 * bound - bound)
                conv.bias.zero_()
            self.convs.append(conv)
            cin = cout
        self.requires_grad_(False)

    def forward(self, x):
        feats = []
        h = 2 * x - 1
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.2)
            feats.append(h)
        return feats


class PretrainedFeatures(nn.Module):
    """Adapter exposing torchvision VGG16 activations at its five ReLU taps.

    ``weights`` is passed to torchvision ("DEFAULT" downloads ImageNet weights;
    ``None`` builds the architecture with random weights).  Inputs in [0, 1]
    are normalized with the ImageNet statistics.
    """

    TAPS = (3, 8, 15, 22, 29)

    def __init__(self, weights="DEFAULT"):
        super().__init__()
        from torchvision.models import vgg16

        layers = vgg16(weights=weights).features[: self.TAPS[-1] + 1]
        self.layers = layers.eval().requires_grad_(False)
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))

    def forward(self, x):
        h = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        feats = []
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i in self.TAPS:
                feats.append(h)
        return feats


class Perceptual(nn.Module):
    """``sum_l 1/(H_l W_l) sum_{h,w} |w_l * (phi_l(x) - phi_l(x_hat))|^2``.

    ``layer_weights`` holds one per-channel weight vector per layer (unit by
    default).
    """

    def __init__(self, features: nn.Module | None = None, layer_weights=None):
        super().__init__()
        self.features = features if features is not None else FeatureNet()
        if layer_weights is None:
            probe = self.features(torch.zeros(1, 3, 32, 32))
            layer_weights = [torch.ones(f.shape[1]) for f in probe]
        self.layer_weights = nn.ParameterList(nn.Parameter(w.clone(), requires_grad=False) for w in layer_weights)

    def per_sample(self, x, x_hat):
        total = 0.0
        for fa, fb, w in zip(self.features(x), self.features(x_hat), self.layer_weights):
            d = (fa - fb) * w.to(fa.dtype).view(1, -1, 1, 1)
            total = total + d.pow(2).sum(dim=1).flatten(1).mean(1)
        return total

    def forward(self, x, x_hat):
        return self.per_sample(x, x_hat).mean()


def perceptual(x, x_hat, feat: Perceptual) -> torch.Tensor:
    return feat(x, x_hat)
