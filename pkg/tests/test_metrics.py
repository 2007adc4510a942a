import numpy as np
import pytest
import scipy.linalg
from hypothesis import given
from hypothesis import strategies as st

from semvq.metrics import FIDFeatures, PerceptualMetric, fid, frechet_distance, psnr


def test_psnr_examples():
    x = np.random.default_rng(0).random((3, 8, 8))
    assert psnr(x, x) == float("inf")
    assert psnr(np.zeros((3, 4, 4)), np.full((3, 4, 4), 0.1)) == pytest.approx(20.0, abs=1e-9)
    noisy = [psnr(x, np.clip(x + s, 0, 1)) for s in (0.01, 0.05, 0.2)]
    assert noisy[0] > noisy[1] > noisy[2]


def scipy_frechet(mu1, s1, mu2, s2):
    covmean = scipy.linalg.sqrtm(s1 @ s2).real
    d = mu1 - mu2
    return float(d @ d + np.trace(s1 + s2 - 2 * covmean))


def random_spd(rng, d):
    a = rng.normal(size=(d, d))
    return a @ a.T + 0.1 * np.eye(d)


def test_frechet_examples():
    assert frechet_distance(0.0, 1.0, 1.0, 1.0).value == pytest.approx(1.0, abs=1e-6)
    mu, s = np.zeros(3), np.diag([1.0, 4.0, 9.0])
    assert frechet_distance(mu, s, mu, s).value < 1e-8
    # diagonal covariances: sum of squared differences of standard deviations
    assert frechet_distance(mu, s, mu + 1, np.eye(3)).value == pytest.approx(3 + 0 + 1 + 4, abs=1e-9)


@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_frechet_matches_general_square_root(seed, d):
    rng = np.random.default_rng(seed)
    mu1, mu2 = rng.normal(size=d), rng.normal(size=d)
    s1, s2 = random_spd(rng, d), random_spd(rng, d)
    res = frechet_distance(mu1, s1, mu2, s2)
    assert not res.regularized
    assert res.value == pytest.approx(scipy_frechet(mu1, s1, mu2, s2), rel=1e-6, abs=1e-8)
    assert res.value == pytest.approx(frechet_distance(mu2, s2, mu1, s1).value, rel=1e-8, abs=1e-10)


def test_frechet_rotation_invariant():
    rng = np.random.default_rng(2)
    q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    mu1, mu2 = rng.normal(size=4), rng.normal(size=4)
    s1, s2 = random_spd(rng, 4), random_spd(rng, 4)
    base = frechet_distance(mu1, s1, mu2, s2).value
    rot = frechet_distance(q @ mu1, q @ s1 @ q.T, q @ mu2, q @ s2 @ q.T).value
    assert rot == pytest.approx(base, rel=1e-9)


def test_fid_on_samples():
    rng = np.random.default_rng(3)
    feats = rng.normal(size=(50, 4))
    assert fid(feats, feats).value < 1e-8
    assert fid(feats[:, 0], feats[:, 0] + 1).value == pytest.approx(1.0, abs=1e-9)
    # fewer samples than dimensions: singular covariance
    small = rng.normal(size=(3, 8))
    res = fid(small, small)
    assert res.regularized and res.value < 1e-6
    with pytest.raises(ValueError):
        fid(feats[:1], feats[:1])
    with pytest.raises(ValueError):
        fid(feats, feats[:, :2])


def test_feature_extractors():
    rng = np.random.default_rng(4)
    imgs = rng.random((2, 3, 16, 16))
    f = FIDFeatures()(imgs)
    assert f.ndim == 2 and f.shape[0] == 2 and np.isfinite(f).all()
    assert np.array_equal(f, FIDFeatures()(imgs))
    lp = PerceptualMetric()
    assert lp(imgs[0], imgs[0])[0] == 0
    assert lp(imgs, imgs[::-1]).shape == (2,)
    assert lp(imgs[0], imgs[1])[0] > 0
