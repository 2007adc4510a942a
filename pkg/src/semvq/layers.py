import math

import torch
import torch.nn.functional as F
from torch import nn


def num_groups(channels: int, max_groups: int = 8) -> int:
    return math.gcd(channels, max_groups)


def plain_norm(channels: int) -> nn.GroupNorm:
    # parameter-free normalization; shared by SPADE so the two degenerate identically
    return nn.GroupNorm(num_groups(channels), channels, affine=False)


class Norm(nn.Module):
    """GroupNorm with a learned affine; ignores the conditioning argument."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.GroupNorm(num_groups(channels), channels)

    def forward(self, x, cond=None):
        return self.norm(x)


class SPADE(nn.Module):
    """Spatially adaptive denormalization.

    The conditioning map is resized to the feature resolution (area
    averaging when shrinking, nearest copy when growing) and projected to a
    per-pixel scale and bias: ``norm(x) * (1 + gamma) + beta``.
    """

    def __init__(self, channels: int, cond_channels: int, hidden: int = 128):
        super().__init__()
        self.norm = plain_norm(channels)
        self.shared = nn.Sequential(nn.Conv2d(cond_channels, hidden, 3, padding=1), nn.ReLU())
        self.gamma = nn.Conv2d(hidden, channels, 3, padding=1)
        self.beta = nn.Conv2d(hidden, channels, 3, padding=1)

    def forward(self, x, cond):
        cond = resize_cond(cond, x.shape[-2:])
        h = self.shared(cond)
        return self.norm(x) * (1 + self.gamma(h)) + self.beta(h)

    def zero_projection(self):
        for conv in (self.gamma, self.beta):
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)


def resize_cond(cond: torch.Tensor, size) -> torch.Tensor:
    size = tuple(size)
    H, W = cond.shape[-2:]
    if (H, W) == size:
        return cond
    if H >= size[0] and W >= size[1]:
        return F.adaptive_avg_pool2d(cond, size)
    return F.interpolate(cond, size=size, mode="nearest")


class ResBlock(nn.Module):
    """Pre-activation residual block: (norm, leaky ReLU, 3x3 conv) x 2 + skip."""

    def __init__(self, cin: int, cout: int, cond_channels: int | None = None, spade_hidden: int = 128):
        super().__init__()
        if cond_channels is None:
            self.norm1, self.norm2 = Norm(cin), Norm(cout)
        else:
            self.norm1 = SPADE(cin, cond_channels, spade_hidden)
            self.norm2 = SPADE(cout, cond_channels, spade_hidden)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Identity() if cin == cout else nn.Conv2d(cin, cout, 1)

    def forward(self, x, cond=None):
        h = self.conv1(F.leaky_relu(self.norm1(x, cond), 0.2))
        h = self.conv2(F.leaky_relu(self.norm2(h, cond), 0.2))
        return self.skip(x) + h


class Attention(nn.Module):
    """Pre-norm multi-head self-attention over grid positions with a residual.

    ``key_mask`` (B, K) restricts which positions may be attended to.  Masked
    keys get exactly zero weight, so outputs carry no dependence on them
    except through the query's own residual path.  Queries with no allowed
    key receive a zero attention update.

    The output projection starts at ``init_scale`` times its default
    initialization (zero by default), so a fresh block is close to identity.
    """

    def __init__(self, channels: int, heads: int = 1, init_scale: float = 0.0):
        super().__init__()
        if channels % heads:
            raise ValueError("channels must be divisible by heads")
        self.heads = heads
        self.norm = nn.LayerNorm(channels)
        self.qkv = nn.Linear(channels, 3 * channels)
        self.proj = nn.Linear(channels, channels)
        with torch.no_grad():
            self.proj.weight.mul_(init_scale)
            self.proj.bias.zero_()

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        B, C, H, W = x.shape
        t = x.flatten(2).transpose(1, 2)  # B, K, C
        q, k, v = self.qkv(self.norm(t)).chunk(3, dim=-1)
        d = C // self.heads
        q, k, v = (a.reshape(B, H * W, self.heads, d).transpose(1, 2) for a in (q, k, v))
        logits = q @ k.transpose(-1, -2) / math.sqrt(d)
        if key_mask is not None:
            allowed = key_mask[:, None, None, :]
            logits = logits.masked_fill(~allowed, float("-inf"))
            any_key = allowed.any(dim=-1, keepdim=True)
            logits = torch.where(any_key, logits, torch.zeros_like(logits))
            attn = logits.softmax(dim=-1) * any_key
        else:
            attn = logits.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, H * W, C)
        t = t + self.proj(out)
        return t.transpose(1, 2).reshape(B, C, H, W)


class FeedForward(nn.Module):
    """Per-position MLP with residual; no mixing across positions.

    The last layer starts at zero so the block begins as the identity.
    """

    def __init__(self, channels: int, mult: int = 2):
        super().__init__()
        self.net = nn.Sequential(
            nn.LayerNorm(channels),
            nn.Linear(channels, mult * channels),
            nn.GELU(),
            nn.Linear(mult * channels, channels),
        )
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def forward(self, x):
        t = x.flatten(2).transpose(1, 2)
        t = t + self.net(t)
        return t.transpose(1, 2).reshape(x.shape)
