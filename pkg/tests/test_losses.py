import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from conftest import central_difference, relative_error
from semvq.losses import (
    FeatureNet,
    LossWeights,
    Perceptual,
    adversarial_terms,
    perceptual,
    residual_edit,
    weighted_ce,
    weighted_l2,
)
from semvq.semantic_map import ClassInfo, ClassTable, cityscapes_table, onehot_torch

TABLE = cityscapes_table()
SKY, SIGN, ROAD, CAR = (TABLE.index(n) for n in ("sky", "traffic sign", "road", "car"))


def onehot(labels):
    return onehot_torch(torch.as_tensor(labels)[None], 19).double()


def random_labels(seed, H=4, W=4):
    return torch.from_numpy(np.random.default_rng(seed).integers(0, 19, size=(H, W)))


def test_loss_weights_validation():
    assert LossWeights() == LossWeights(1.0, 1.0, 0.25)
    for bad in (-1.0, float("inf"), float("nan")):
        with pytest.raises(ValueError):
            LossWeights(gan=bad)


def test_wce_examples():
    s = onehot([[CAR]])
    probs = torch.zeros(1, 19, 1, 1, dtype=torch.float64)
    probs[0, CAR] = 1.0
    assert weighted_ce(s, probs, TABLE) == 0
    probs[0, CAR] = 0.5
    probs[0, ROAD] = 0.5
    assert weighted_ce(s, probs, TABLE).item() == pytest.approx(0.346574, abs=1e-6)
    with pytest.raises(ValueError):
        weighted_ce(s, probs * 2, TABLE)


def test_wce_linear_in_class_weight():
    labels = random_labels(0)
    s = onehot(labels)
    probs = torch.softmax(torch.randn(1, 19, 4, 4, dtype=torch.float64), 1)
    base = TABLE.weights("wce").copy()
    c = int(labels[0, 0])
    only_c = np.zeros(19)
    only_c[c] = base[c]
    doubled = base.copy()
    doubled[c] *= 2
    contribution = weighted_ce(s, probs, torch.from_numpy(only_c))
    assert weighted_ce(s, probs, torch.from_numpy(doubled)).item() == pytest.approx(
        (weighted_ce(s, probs, TABLE) + contribution).item(), rel=1e-12)


def test_wce_mean_reduction():
    s = onehot(random_labels(1))
    probs = torch.softmax(torch.randn(1, 19, 4, 4, dtype=torch.float64), 1)
    assert weighted_ce(s, probs, TABLE, reduction="mean").item() == pytest.approx(
        weighted_ce(s, probs, TABLE).item() / 16, rel=1e-12)


def test_wl2_examples():
    x = torch.rand(1, 3, 2, 2, dtype=torch.float64)
    s = onehot([[SIGN, ROAD], [SKY, SKY]])
    assert weighted_l2(x, x, s, TABLE) == 0
    x_hat = x.clone()
    x_hat[0, :, 1, :] += torch.randn(3, 2, dtype=torch.float64)
    assert weighted_l2(x, x_hat, s, TABLE) == 0
    x_hat = x.clone()
    x_hat[0, 0, 0, 0] += 1.0
    assert weighted_l2(x, x_hat, s, TABLE).item() == pytest.approx(0.25, abs=1e-15)


@given(st.integers(0, 2**31 - 1))
def test_losses_nonnegative_and_zero_on_matching_support(seed):
    g = torch.Generator().manual_seed(seed)
    labels = random_labels(seed % 1000)
    s = onehot(labels)
    x = torch.rand(1, 3, 4, 4, generator=g, dtype=torch.float64)
    x_hat = torch.rand(1, 3, 4, 4, generator=g, dtype=torch.float64)
    assert weighted_l2(x, x_hat, s, TABLE) >= 0
    zero_w = torch.from_numpy(TABLE.weights("l2") == 0)[labels]
    matched = torch.where(zero_w, x_hat, x)
    assert weighted_l2(x, matched, s, TABLE) == 0
    probs = torch.softmax(torch.randn(1, 19, 4, 4, generator=g, dtype=torch.float64), 1)
    assert weighted_ce(s, probs, TABLE) >= 0
    assert weighted_ce(s, s, TABLE) == 0


def test_residual_edit_examples():
    x = torch.ones(1, 3, 1, 2, dtype=torch.float64)
    x_hat = torch.zeros_like(x)
    out = residual_edit(x, x_hat, onehot([[SKY, CAR]]), TABLE)
    assert torch.all(out[0, :, 0, 0] == 0.9)
    assert torch.all(out[0, :, 0, 1] == 0.0)
    full = ClassTable(tuple(ClassInfo(i, f"c{i}", False, 0.5, 0.5, 1.0, (0, 0, 0)) for i in range(19)))
    x, x_hat = torch.rand(1, 3, 4, 4, dtype=torch.float64), torch.rand(1, 3, 4, 4, dtype=torch.float64)
    assert torch.equal(residual_edit(x, x_hat, onehot(random_labels(2)), full), x)


def test_residual_edit_composition():
    s = onehot(random_labels(3))
    x, x_hat = torch.rand(1, 3, 4, 4, dtype=torch.float64), torch.rand(1, 3, 4, 4, dtype=torch.float64)
    twice = residual_edit(x, residual_edit(x, x_hat, s, TABLE), s, TABLE)
    w = TABLE.weights("rel")
    once = residual_edit(x, x_hat, s, torch.from_numpy(1 - (1 - w) ** 2))
    assert torch.allclose(twice, once, atol=1e-14)


def test_adversarial_examples():
    zero = torch.zeros(())
    l_disc, l_gen = adversarial_terms(zero, zero)
    assert l_disc.item() == pytest.approx(2 * math.log(2), abs=1e-7)
    _, l_gen = adversarial_terms(zero, torch.tensor(60.0))
    assert l_gen.item() < 1e-20


def test_adversarial_gradient_signs():
    d_real = torch.tensor(0.3, dtype=torch.float64, requires_grad=True)
    d_fake = torch.tensor(-0.2, dtype=torch.float64, requires_grad=True)
    l_disc, l_gen = adversarial_terms(d_real, d_fake)
    gr, gf = torch.autograd.grad(l_disc, (d_real, d_fake))
    assert gr < 0 and gf > 0
    (gg,) = torch.autograd.grad(l_gen, d_fake)
    assert gg < 0
    num = central_difference(lambda v: adversarial_terms(d_real.detach(), v)[1], d_fake.detach())
    assert relative_error(gg, num) < 1e-6


def test_perceptual_examples():
    feat = Perceptual(FeatureNet(seed=0)).double()
    x = torch.rand(2, 3, 16, 16, dtype=torch.float64)
    y = torch.rand(2, 3, 16, 16, dtype=torch.float64)
    assert perceptual(x, x, feat) == 0
    assert perceptual(x, y, feat).item() == pytest.approx(perceptual(y, x, feat).item(), rel=1e-12)
    values = [perceptual(x, y + t * (x - y), feat).item() for t in np.linspace(0, 1, 11)]
    assert all(a > b for a, b in zip(values, values[1:]))
    assert values[-1] == pytest.approx(0.0, abs=1e-20)


def test_feature_net_is_frozen_and_seeded():
    a, b = FeatureNet(seed=4), FeatureNet(seed=4)
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))
    assert not any(p.requires_grad for p in a.parameters())
    assert not torch.equal(a.convs[0].weight, FeatureNet(seed=5).convs[0].weight)


def _fd_check(loss_fn, x):
    x = x.detach().clone().requires_grad_(True)
    loss_fn(x).backward()
    num = central_difference(loss_fn, x)
    assert x.grad.abs().max() > 0
    assert relative_error(x.grad, num) < 1e-4


def test_loss_gradients_match_finite_differences():
    torch.manual_seed(0)
    s = onehot(random_labels(5))
    x = torch.rand(1, 3, 4, 4, dtype=torch.float64)
    logits = torch.randn(1, 19, 4, 4, dtype=torch.float64)
    _fd_check(lambda v: weighted_ce(s, torch.softmax(v, 1), TABLE), logits)
    _fd_check(lambda v: weighted_ce(s, v, TABLE, from_logits=True), logits)
    _fd_check(lambda v: weighted_l2(x, v, s, TABLE), torch.rand(1, 3, 4, 4, dtype=torch.float64))
    feat = Perceptual(FeatureNet(seed=0)).double()
    _fd_check(lambda v: perceptual(x, v, feat), torch.rand(1, 3, 4, 4, dtype=torch.float64))
    _fd_check(lambda v: residual_edit(x, v, s, TABLE).pow(2).sum(), torch.rand(1, 3, 4, 4, dtype=torch.float64))
    _fd_check(lambda v: adversarial_terms(v[0], v[1])[0], torch.tensor([0.4, -1.1], dtype=torch.float64))


def test_pretrained_adapter_plugs_into_perceptual():
    pytest.importorskip("torchvision")
    from semvq.losses import PretrainedFeatures

    torch.manual_seed(0)
    feat = Perceptual(PretrainedFeatures(weights=None))
    assert len(feat.layer_weights) == 5
    x, y = torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 32)
    assert perceptual(x, x, feat) == 0 and perceptual(x, y, feat) > 0
