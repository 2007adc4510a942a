"""Image-quality metrics: PSNR, perceptual distance and Frechet distance."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .losses import FeatureNet, Perceptual

log = logging.getLogger(__name__)

FID_EPS = 1e-6


def psnr(x, x_hat) -> float:
    """``10 log10(1 / MSE)`` in dB for images in [0, 1]; ``inf`` when identical."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    mse = float(np.mean((x - x_hat) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


class PerceptualMetric:
    """Per-image feature-space distance using a frozen random extractor."""

    def __init__(self, seed: int = 0):
        self.net = Perceptual(FeatureNet(seed=seed))

    @torch.no_grad()
    def __call__(self, x, x_hat) -> np.ndarray:
        x = torch.as_tensor(np.asarray(x, dtype=np.float32))
        x_hat = torch.as_tensor(np.asarray(x_hat, dtype=np.float32))
        if x.ndim == 3:
            x, x_hat = x[None], x_hat[None]
        return self.net.per_sample(x, x_hat).numpy().astype(np.float64)


def _sqrtm_psd(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


@dataclass
class FrechetResult:
    value: float
    regularized: bool


def frechet_distance(mu1, sigma1, mu2, sigma2, eps: float = FID_EPS) -> FrechetResult:
    """``|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)``.

    The cross term uses the symmetric form, which has the same trace as
    ``(S1 S2)^1/2`` and only needs eigendecompositions of symmetric matrices.
    Singular covariances get ``eps * I`` added to both and the result says so.
    """
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, dtype=np.float64)), np.atleast_1d(np.asarray(mu2, dtype=np.float64))
    s1, s2 = np.atleast_2d(np.asarray(sigma1, dtype=np.float64)), np.atleast_2d(np.asarray(sigma2, dtype=np.float64))
    if mu1.shape != mu2.shape or s1.shape != s2.shape or s1.shape != (mu1.size, mu1.size):
        raise ValueError("mean and covariance shapes do not agree")
    regularized = False
    if min(np.linalg.eigvalsh(s1).min(), np.linalg.eigvalsh(s2).min()) <= 0:
        regularized = True
        eye = eps * np.eye(mu1.size)
        s1, s2 = s1 + eye, s2 + eye
        log.info("singular covariance: added %g I before the matrix square root", eps)
    r1 = _sqrtm_psd(s1)
    cross = np.trace(_sqrtm_psd(r1 @ s2 @ r1))
    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2 * cross)
    return FrechetResult(max(value, 0.0), regularized)


def fid(real_feats, fake_feats, eps: float = FID_EPS) -> FrechetResult:
    """Frechet distance between two ``(n, d)`` feature sets, ``n >= 2``."""
    a = np.asarray(real_feats, dtype=np.float64)
    b = np.asarray(fake_feats, dtype=np.float64)
    if a.ndim == 1:
        a, b = a[:, None], b[:, None]
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("each feature set needs at least two samples")
    if a.shape[1] != b.shape[1]:
        raise ValueError("feature dimensions differ")
    cov = lambda f: np.atleast_2d(np.cov(f, rowvar=False))
    return frechet_distance(a.mean(0), cov(a), b.mean(0), cov(b), eps)


class FIDFeatures:
    """Globally pooled activations of every layer of a frozen random extractor."""

    def __init__(self, seed: int = 1):
        self.net = FeatureNet(seed=seed)

    @torch.no_grad()
    def __call__(self, images) -> np.ndarray:
        x = torch.as_tensor(np.asarray(images, dtype=np.float32))
        feats = [f.mean(dim=(2, 3)) for f in self.net(x)]
        return torch.cat(feats, dim=1).numpy().astype(np.float64)
