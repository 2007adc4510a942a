"""Semantic segmentation maps: class tables, one-hot volumes, scoring.

Label maps are ``(H, W)`` integer arrays; one-hot maps are ``(n_c, H, W)``
float arrays.  Both numpy and torch inputs are accepted by the helpers that
sit on the training path (``onehot_torch``, ``class_weights``).
"""

from __future__ import annotations

import math

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image


class InvalidClassError(ValueError):
    pass


@dataclass(frozen=True)
class ClassInfo:
    class_id: int
    name: str
    is_relevant: bool = False
    w_wce: float = 0.5
    w_l2: float = 0.15
    w_rel: float = 0.0
    color: tuple[int, int, int] = (0, 0, 0)


@dataclass(frozen=True)
class ClassTable:
    classes: tuple[ClassInfo, ...]

    def __post_init__(self):
        ids = [c.class_id for c in self.classes]
        if ids != list(range(len(ids))):
            raise ValueError(f"class ids must be contiguous from 0, got {ids}")
        for c in self.classes:
            for w in (c.w_wce, c.w_l2, c.w_rel):
                if not 0.0 <= w <= 1.0:
                    raise ValueError(f"weight {w} of class {c.name!r} outside [0, 1]")

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.classes]

    def index(self, name: str) -> int:
        for c in self.classes:
            if c.name == name:
                return c.class_id
        raise KeyError(name)

    def weights(self, which: str) -> np.ndarray:
        """Per-class weight vector for ``which`` in {"wce", "l2", "rel"}."""
        if which not in ("wce", "l2", "rel"):
            raise ValueError(f"unknown weight column {which!r}")
        return np.array([getattr(c, f"w_{which}") for c in self.classes], dtype=np.float64)

    @property
    def relevant(self) -> np.ndarray:
        return np.array([c.is_relevant for c in self.classes], dtype=bool)

    @property
    def palette(self) -> np.ndarray:
        return np.array([c.color for c in self.classes], dtype=np.uint8)


# (name, relevant, w_wce, w_l2, w_rel, color)
_CITYSCAPES = [
    ("road", False, 0.50, 0.15, 0.40, (128, 64, 128)),
    ("sidewalk", False, 0.50, 0.15, 0.0, (244, 35, 232)),
    ("building", False, 0.50, 0.15, 0.0, (70, 70, 70)),
    ("wall", False, 0.50, 0.15, 0.0, (102, 102, 156)),
    ("fence", False, 0.50, 0.15, 0.0, (190, 153, 153)),
    ("pole", False, 0.50, 0.15, 0.0, (153, 153, 153)),
    ("traffic light", True, 1.0, 1.0, 0.0, (250, 170, 30)),
    ("traffic sign", True, 1.0, 1.0, 0.0, (220, 220, 0)),
    ("vegetation", False, 0.20, 0.0, 0.80, (107, 142, 35)),
    ("terrain", False, 0.50, 0.15, 0.0, (152, 251, 152)),
    ("sky", False, 0.20, 0.0, 0.90, (70, 130, 180)),
    ("person", True, 0.85, 0.55, 0.0, (220, 20, 60)),
    ("rider", True, 0.85, 0.55, 0.0, (255, 0, 0)),
    ("car", False, 0.50, 0.15, 0.0, (0, 0, 142)),
    ("truck", False, 0.50, 0.15, 0.0, (0, 0, 70)),
    ("bus", False, 0.50, 0.15, 0.0, (0, 60, 100)),
    ("train", False, 0.50, 0.15, 0.0, (0, 80, 100)),
    ("motorcycle", False, 0.50, 0.15, 0.0, (0, 0, 230)),
    ("bicycle", False, 0.50, 0.15, 0.0, (119, 11, 32)),
]


def cityscapes_table() -> ClassTable:
    """The 19 Cityscapes evaluation classes with the driving-task weights."""
    return ClassTable(
        tuple(
            ClassInfo(i, name, rel, wce, wl2, wrel, color)
            for i, (name, rel, wce, wl2, wrel, color) in enumerate(_CITYSCAPES)
        )
    )


def validate_labels(labels: np.ndarray, table: ClassTable) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"label map must be 2-D, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= table.n_classes):
        raise InvalidClassError(
            f"label values must lie in [0, {table.n_classes - 1}], "
            f"got [{labels.min()}, {labels.max()}]"
        )


@dataclass
class SemanticMap:
    onehot: np.ndarray
    table: ClassTable = field(default_factory=cityscapes_table)
    check_size: bool = True

    def __post_init__(self):
        v = self.onehot
        if v.ndim != 3 or v.shape[0] != self.table.n_classes:
            raise ValueError(f"expected ({self.table.n_classes}, H, W), got {v.shape}")
        if self.check_size and (v.shape[1] % 16 or v.shape[2] % 16):
            raise ValueError(f"H and W must be divisible by 16, got {v.shape[1:]}")
        if not (np.all((v == 0) | (v == 1)) and np.all(v.sum(axis=0) == 1)):
            raise ValueError("map is not one-hot")

    @property
    def labels(self) -> np.ndarray:
        return decode_argmax(self.onehot)

    @property
    def shape(self) -> tuple[int, int]:
        return self.onehot.shape[1], self.onehot.shape[2]


def encode_onehot(labels: np.ndarray, table: ClassTable, check_size: bool = True) -> SemanticMap:
    labels = np.asarray(labels)
    validate_labels(labels, table)
    onehot = np.eye(table.n_classes, dtype=np.float32)[labels].transpose(2, 0, 1)
    return SemanticMap(np.ascontiguousarray(onehot), table, check_size=check_size)


def decode_argmax(scores) -> np.ndarray:
    """Per-pixel argmax over the class axis (axis -3); ties go to the lowest id."""
    if isinstance(scores, torch.Tensor):
        if torch.isnan(scores).any():
            raise FloatingPointError("NaN in class scores")
        # torch.argmax returns the first maximal index
        return scores.argmax(dim=-3).cpu().numpy()
    scores = np.asarray(scores)
    if np.isnan(scores).any():
        raise FloatingPointError("NaN in class scores")
    return scores.argmax(axis=-3)


def onehot_torch(labels: torch.Tensor, n_classes: int) -> torch.Tensor:
    """(B, H, W) long labels -> (B, n_c, H, W) float one-hot."""
    return torch.nn.functional.one_hot(labels.long(), n_classes).permute(0, 3, 1, 2).float()


def compute_miou(s: np.ndarray, s_pred: np.ndarray) -> float:
    """Mean IoU over classes present in either map."""
    s = np.asarray(s)
    s_pred = np.asarray(s_pred)
    if s.shape != s_pred.shape:
        raise ValueError(f"shape mismatch {s.shape} vs {s_pred.shape}")
    n = int(max(s.max(initial=0), s_pred.max(initial=0))) + 1
    cm = np.bincount(s.ravel() * n + s_pred.ravel(), minlength=n * n).reshape(n, n)
    inter = np.diag(cm)
    union = cm.sum(0) + cm.sum(1) - inter
    present = union > 0
    if not present.any():
        return 1.0
    ious = inter[present] / union[present]
    # correctly rounded sum: the result does not depend on summation order
    return math.fsum(ious.tolist()) / ious.size


def weight_map(s: SemanticMap, which: str) -> np.ndarray:
    return s.table.weights(which)[s.labels]


def class_weights(table: ClassTable, which: str, like: torch.Tensor | None = None) -> torch.Tensor:
    w = torch.as_tensor(table.weights(which))
    if like is not None:
        w = w.to(dtype=like.dtype, device=like.device)
    return w


def read_label_png(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P"):
            raise ValueError(f"{path}: label PNG must be single-channel, got mode {im.mode}")
        return np.array(im, dtype=np.int64)


def write_label_png(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise ValueError("class ids must fit in 8 bits")
    Image.fromarray(labels.astype(np.uint8), mode="L").save(Path(path))


def write_color_png(path, labels: np.ndarray, table: ClassTable) -> None:
    Image.fromarray(table.palette[np.asarray(labels)], mode="RGB").save(Path(path))
