"""Dataset I/O and a synthetic street-scene generator for desk-scale runs.

A dataset directory holds pairs ``<name>.png`` (RGB) and
``<name>_labels.png`` (8-bit class ids).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .semantic_map import ClassTable, cityscapes_table, read_label_png, validate_labels, write_label_png


def read_image_png(path) -> np.ndarray:
    """RGB PNG -> float32 (3, H, W) in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def write_image_png(path, x: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(x).transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(Path(path))


def load_pairs(directory, table: ClassTable | None = None):
    """All ``(image, labels, name)`` triples of a dataset directory, sorted by name."""
    table = table or cityscapes_table()
    directory = Path(directory)
    out = []
    for lp in sorted(directory.glob("*_labels.png")):
        name = lp.name[: -len("_labels.png")]
        ip = directory / f"{name}.png"
        if not ip.exists():
            raise FileNotFoundError(f"{ip} missing for {lp}")
        x, labels = read_image_png(ip), read_label_png(lp)
        if x.shape[1:] != labels.shape:
            raise ValueError(f"{name}: image {x.shape[1:]} and labels {labels.shape} differ")
        validate_labels(labels, table)
        out.append((x, labels, name))
    if not out:
        raise FileNotFoundError(f"no *_labels.png pairs in {directory}")
    return out


def save_pairs(directory, pairs, prefix: str = "img") -> list[str]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, (x, labels) in enumerate(pairs):
        name = f"{prefix}{i:04d}"
        write_image_png(directory / f"{name}.png", x)
        write_label_png(directory / f"{name}_labels.png", labels)
        names.append(name)
    return names


def _rect(labels, cid, top, left, h, w):
    H, W = labels.shape
    labels[max(top, 0):min(top + h, H), max(left, 0):min(left + w, W)] = cid


def synthetic_scene(rng: np.random.Generator, H: int = 64, W: int = 128, table: ClassTable | None = None):
    """A dashboard-camera-like toy scene: sky, buildings, trees, road, cars, people, signs."""
    table = table or cityscapes_table()
    c = table.index
    labels = np.full((H, W), c("building"), dtype=np.int64)
    horizon = int(H * rng.uniform(0.45, 0.6))
    # skyline
    cols = np.arange(W)
    sky_line = np.zeros(W, dtype=int)
    x0 = 0
    while x0 < W:
        bw = int(rng.integers(W // 8, W // 3))
        sky_line[x0:x0 + bw] = int(rng.uniform(0.1, 0.35) * H)
        x0 += bw
    labels[np.arange(H)[:, None] < sky_line[None, :]] = c("sky")
    # trees
    for _ in range(int(rng.integers(1, 3))):
        cy, cx = rng.uniform(0.2, 0.45) * H, rng.uniform(0, W)
        ry, rx = rng.uniform(0.1, 0.18) * H, rng.uniform(0.08, 0.15) * W
        yy, xx = np.ogrid[:H, :W]
        labels[((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1] = c("vegetation")
    # road with sidewalks
    for y in range(horizon, H):
        t = (y - horizon) / max(H - horizon, 1)
        half = int(W * (0.15 + 0.35 * t))
        walk = int(3 + 8 * t)
        mid = W // 2
        labels[y, :] = c("sidewalk")
        labels[y, max(mid - half, 0):min(mid + half, W)] = c("road")
        labels[y, : max(mid - half - walk, 0)] = c("building") if t < 0.5 else c("sidewalk")
    # cars
    for _ in range(int(rng.integers(1, 3))):
        h = int(rng.integers(H // 8, H // 5))
        w = int(h * rng.uniform(1.5, 2.2))
        top = int(rng.integers(horizon - h // 3, H - h))
        _rect(labels, c("car"), top, int(rng.integers(W // 4, 3 * W // 4 - w)), h, w)
    # people on the sidewalks
    for _ in range(int(rng.integers(1, 3))):
        h = int(rng.integers(H // 6, H // 4))
        w = max(4, h // 3)
        top = int(rng.integers(horizon - h // 2, H - h))
        left = int(rng.choice([rng.integers(0, W // 5), rng.integers(4 * W // 5 - w, W - w)]))
        _rect(labels, c("person"), top, left, h, w)
    # signs and lights on poles
    for kind in ("traffic sign", "traffic light"):
        for _ in range(int(rng.integers(1, 3))):
            size = int(rng.integers(6, 10))
            left = int(rng.integers(0, W - size))
            top = int(rng.integers(horizon // 3, max(horizon - 2 * size, horizon // 3 + 1)))
            h, w = (size, size) if kind == "traffic sign" else (int(size * 1.5), max(4, size * 2 // 3))
            _rect(labels, c("pole"), top + h, left + w // 2 - 1, horizon - top - h + 4, 3)
            _rect(labels, c(kind), top, left, h, w)
    return _render(labels, rng, table), labels


def _render(labels, rng, table):
    H, W = labels.shape
    palette = table.palette.astype(np.float32) / 255.0
    shift = rng.uniform(-0.12, 0.12, size=palette.shape).astype(np.float32)
    base = np.clip(palette + shift, 0, 1)[labels].transpose(2, 0, 1)
    noise = ndimage.gaussian_filter(rng.normal(0, 1, size=(3, H, W)), sigma=(0, 2, 2))
    noise /= max(np.abs(noise).max(), 1e-6)
    shade = np.linspace(1.05, 0.9, H, dtype=np.float32)[None, :, None]
    x = base * shade + 0.06 * noise
    return np.clip(x, 0, 1).astype(np.float32)


def synthetic_dataset(n: int, seed: int = 0, H: int = 64, W: int = 128, table: ClassTable | None = None):
    rng = np.random.default_rng(seed)
    return [synthetic_scene(rng, H, W, table) for _ in range(n)]
