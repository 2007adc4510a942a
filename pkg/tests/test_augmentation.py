import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from semvq.augmentation import augment_batch, color_jitter, harvest, paste, random_crop, random_rotate
from semvq.data import synthetic_scene
from semvq.semantic_map import cityscapes_table

TABLE = cityscapes_table()
ROAD, SIGN, LIGHT, PERSON = (TABLE.index(n) for n in ("road", "traffic sign", "traffic light", "person"))


def blank(H=16, W=16, fill=ROAD):
    return np.zeros((3, H, W)), np.full((H, W), fill)


def test_harvest_splits_connected_components():
    x, labels = blank()
    labels[1:3, 1:3] = SIGN
    labels[3, 3] = SIGN  # diagonal neighbour only: separate component
    labels[8:12, 5:7] = LIGHT
    x[:, labels == SIGN] = 0.7
    patches = harvest([(x, labels)], [SIGN, LIGHT])
    sizes = sorted((p.class_id, int(p.mask.sum())) for p in patches)
    assert sizes == sorted([(SIGN, 1), (SIGN, 4), (LIGHT, 8)])
    sign4 = next(p for p in patches if p.class_id == SIGN and p.mask.sum() == 4)
    assert sign4.mask.shape == (2, 2) and np.all(sign4.pixels == 0.7)
    assert harvest([blank()], [SIGN]) == []


def sign_patch():
    x, labels = blank(4, 4)
    labels[1:3, 1:3] = SIGN
    return harvest([(x + 0.5, labels)], [SIGN])


def test_paste_with_zero_objects_is_identity():
    x, labels = blank()
    xa, la, placed = paste(x, labels, sign_patch(), np.random.default_rng(0), TABLE, max_objects=0)
    assert placed == 0 and np.array_equal(la, labels) and np.array_equal(xa, x)


def test_paste_on_free_background_places_every_object():
    x, labels = blank(64, 64)
    for seed in range(5):
        rng = np.random.default_rng(seed)
        n = int(np.random.default_rng(seed).integers(0, 4))
        _, la, placed = paste(x, labels, sign_patch(), rng, TABLE, max_objects=3)
        assert placed == n
        # legal sites never overlap earlier pastes
        assert (la == SIGN).sum() == 4 * n


def test_paste_never_overwrites_relevant_pixels():
    x, labels = blank(8, 8, fill=PERSON)
    xa, la, placed = paste(x, labels, sign_patch(), np.random.default_rng(1), TABLE, max_objects=25)
    assert placed == 0 and np.array_equal(la, labels)


@given(st.integers(0, 2**31 - 1))
def test_paste_invariants(seed):
    rng = np.random.default_rng(seed)
    x, labels = synthetic_scene(rng, 32, 64, TABLE)
    donor_x, donor_l = synthetic_scene(rng, 32, 64, TABLE)
    donor_l[2:6, 2:5] = SIGN
    patches = harvest([(donor_x, donor_l)], [SIGN, LIGHT])
    xa, la, _ = paste(x, labels, patches, rng, TABLE, max_objects=10)
    relevant = TABLE.relevant
    keep = relevant[labels]
    assert np.array_equal(la[keep], labels[keep])
    changed = la != labels
    assert np.isin(la[changed], [SIGN, LIGHT]).all()
    assert np.array_equal(xa[:, ~changed], x[:, ~changed])
    assert set(np.unique(la)) <= set(range(TABLE.n_classes))


def test_geometric_ops_keep_shapes_and_label_set():
    rng = np.random.default_rng(3)
    x, labels = synthetic_scene(rng, 32, 64, TABLE)
    for op in (random_crop, random_rotate):
        xo, lo = op(x, labels, rng)
        assert xo.shape == x.shape and lo.shape == labels.shape
        assert set(np.unique(lo)) <= set(np.unique(labels))
        assert xo.min() >= 0 and xo.max() <= 1
    j = color_jitter(x, rng)
    assert j.shape == x.shape and j.min() >= 0 and j.max() <= 1


def test_augment_batch_is_deterministic():
    rng = np.random.default_rng(4)
    batch = [synthetic_scene(rng, 32, 64, TABLE) for _ in range(3)]
    a = augment_batch(batch, np.random.default_rng(9), TABLE)
    b = augment_batch(batch, np.random.default_rng(9), TABLE)
    for (xa, la), (xb, lb) in zip(a, b):
        assert np.array_equal(xa, xb) and np.array_equal(la, lb)
        assert xa.dtype == np.float32 and xa.shape == (3, 32, 64)
