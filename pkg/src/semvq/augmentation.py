"""Copy-paste enhancement of rare relevant classes, plus crop/rotate/jitter.

Operates on numpy pairs: image ``(3, H, W)`` float in [0, 1] and label map
``(H, W)`` int.  Randomness comes only from the ``numpy.random.Generator``
passed in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .semantic_map import ClassTable, validate_labels

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


@dataclass
class PastePatch:
    pixels: np.ndarray  # (3, h, w)
    mask: np.ndarray  # (h, w) bool, true only on class pixels
    class_id: int
    source: int


def harvest(batch, class_ids) -> list[PastePatch]:
    """One patch per 4-connected component of each target class, cropped tight."""
    patches = []
    for src, (x, labels) in enumerate(batch):
        for cid in class_ids:
            comp, n = ndimage.label(labels == cid, structure=FOUR_CONNECTED)
            for k, box in enumerate(ndimage.find_objects(comp), start=1):
                if box is None:
                    continue
                mask = comp[box] == k
                patches.append(PastePatch(x[:, box[0], box[1]].copy(), mask, int(cid), src))
    return patches


def paste(x, labels, patches, rng: np.random.Generator, table: ClassTable, *,
          max_objects: int = 25, attempts: int = 50, exclude_source: int | None = None):
    """Paste ``n ~ U{0..max_objects}`` randomly drawn patches where they fit.

    A site is legal when no pixel under the patch mask already belongs to a
    relevant class (including earlier pastes).  Patches with no legal site
    after ``attempts`` tries are skipped.  Returns ``(x_aug, labels_aug, placed)``.
    """
    n = int(rng.integers(0, max_objects + 1))
    pool = [p for p in patches if p.source != exclude_source]
    x_aug, l_aug = x.copy(), labels.copy()
    placed = 0
    if n == 0 or not pool:
        return x_aug, l_aug, placed
    relevant = table.relevant
    H, W = labels.shape
    for i in rng.integers(0, len(pool), size=n):
        p = pool[i]
        h, w = p.mask.shape
        if h > H or w > W:
            continue
        for _ in range(attempts):
            top = int(rng.integers(0, H - h + 1))
            left = int(rng.integers(0, W - w + 1))
            window = l_aug[top:top + h, left:left + w]
            if relevant[window[p.mask]].any():
                continue
            window[p.mask] = p.class_id
            x_aug[:, top:top + h, left:left + w][:, p.mask] = p.pixels[:, p.mask]
            placed += 1
            break
    validate_labels(l_aug, table)
    return x_aug, l_aug, placed


def random_crop(x, labels, rng, min_scale: float = 0.8):
    """Crop a random window and resize it back to the input size."""
    H, W = labels.shape
    scale = rng.uniform(min_scale, 1.0)
    h, w = max(1, int(round(H * scale))), max(1, int(round(W * scale)))
    top, left = int(rng.integers(0, H - h + 1)), int(rng.integers(0, W - w + 1))
    xc = x[:, top:top + h, left:left + w]
    lc = labels[top:top + h, left:left + w]
    zoom = (H / h, W / w)
    xr = np.stack([ndimage.zoom(c, zoom, order=1, mode="nearest", grid_mode=True) for c in xc])
    lr = ndimage.zoom(lc, zoom, order=0, mode="nearest", grid_mode=True)
    return np.clip(xr[:, :H, :W], 0, 1), lr[:H, :W]


def random_rotate(x, labels, rng, max_degrees: float = 5.0):
    angle = rng.uniform(-max_degrees, max_degrees)
    xr = np.stack([ndimage.rotate(c, angle, reshape=False, order=1, mode="nearest") for c in x])
    lr = ndimage.rotate(labels, angle, reshape=False, order=0, mode="nearest")
    return np.clip(xr, 0, 1), lr


def color_jitter(x, rng, strength: float = 0.1):
    brightness = rng.uniform(1 - strength, 1 + strength)
    contrast = rng.uniform(1 - strength, 1 + strength)
    saturation = rng.uniform(1 - strength, 1 + strength)
    out = x * brightness
    mean = out.mean()
    out = (out - mean) * contrast + mean
    gray = out.mean(axis=0, keepdims=True)
    out = (out - gray) * saturation + gray
    return np.clip(out, 0, 1)


def standard_augment(x, labels, rng):
    x, labels = random_crop(x, labels, rng)
    x, labels = random_rotate(x, labels, rng)
    return color_jitter(x, rng), labels


def augment_batch(batch, rng, table: ClassTable, paste_classes=("traffic sign", "traffic light")):
    """Standard augmentation per pair, then copy-paste across the mini-batch."""
    batch = [standard_augment(x, l, rng) for x, l in batch]
    ids = [table.index(name) for name in paste_classes]
    patches = harvest(batch, ids)
    out = []
    for i, (x, l) in enumerate(batch):
        xa, la, _ = paste(x, l, patches, rng, table, exclude_source=i)
        out.append((xa.astype(np.float32), la))
    return out
