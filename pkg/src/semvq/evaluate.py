"""Rate/quality sweeps over masking fractions.

Every grid point runs the full path: encode, serialize to a bitstream,
parse it back, decode.  Per-image rows and per-grid-point FID rows are
written as CSV and plots are drawn from those files only.

``records.csv`` columns::

    image, m_x, m_s, n_x, n_s, bpp, bpp_measured, payload_bits, psnr, lpips, miou

``fid.csv`` columns::

    m_x, m_s, fid, regularized, n_images
"""

from __future__ import annotations

import csv
import itertools
import json
import shlex
import subprocess
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .bitstream import MODE_PREFIX, BitstreamHeader, bpp_total, deserialize, payload_bits, serialize
from .data import write_image_png
from .metrics import FIDFeatures, PerceptualMetric, fid, psnr
from .networks import Codec
from .semantic_map import ClassTable, cityscapes_table, compute_miou, onehot_torch, read_label_png


class SegmenterError(RuntimeError):
    pass


class DecodedMapSegmenter:
    """Fallback: the semantic map the codec itself reconstructed."""

    def __call__(self, image: np.ndarray, decoded_labels: np.ndarray) -> np.ndarray:
        return decoded_labels


class SubprocessSegmenter:
    """External segmenter invoked as a command; label PNG in, label PNG out.

    ``command`` may contain ``{input}`` (RGB PNG to segment) and ``{output}``
    (where the tool must write an 8-bit class-id PNG); otherwise both paths
    are appended as the last two arguments.
    """

    def __init__(self, command: str, timeout: float = 600.0):
        self.command = command
        self.timeout = timeout

    def __call__(self, image: np.ndarray, decoded_labels: np.ndarray) -> np.ndarray:
        with tempfile.TemporaryDirectory() as tmp:
            src, dst = Path(tmp) / "image.png", Path(tmp) / "labels.png"
            write_image_png(src, image)
            if "{input}" in self.command or "{output}" in self.command:
                argv = shlex.split(self.command.format(input=src, output=dst))
            else:
                argv = shlex.split(self.command) + [str(src), str(dst)]
            proc = subprocess.run(argv, capture_output=True, text=True, timeout=self.timeout)
            if proc.returncode != 0:
                raise SegmenterError(f"segmenter exited with {proc.returncode}: {proc.stderr.strip()}")
            if not dst.exists():
                raise SegmenterError("segmenter wrote no label map")
            labels = read_label_png(dst)
        if labels.shape != image.shape[1:]:
            raise SegmenterError(f"segmenter returned {labels.shape}, expected {image.shape[1:]}")
        return labels


@dataclass
class EvalRecord:
    image: str
    m_x: float
    m_s: float
    n_x: int
    n_s: int
    bpp: float
    bpp_measured: float
    payload_bits: int
    psnr: float
    lpips: float
    miou: float


@dataclass
class FIDRecord:
    m_x: float
    m_s: float
    fid: float
    regularized: bool
    n_images: int


@dataclass
class EvalReport:
    records: list[EvalRecord] = field(default_factory=list)
    fids: list[FIDRecord] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    grid: list[tuple[float, float]] = field(default_factory=list)

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"records": out / "records.csv", "fid": out / "fid.csv", "config": out / "config.json"}
        _write_rows(paths["records"], EvalRecord, self.records)
        _write_rows(paths["fid"], FIDRecord, self.fids)
        paths["config"].write_text(json.dumps({**self.config, "grid": self.grid}, indent=2))
        return paths


def _write_rows(path, cls, rows):
    names = [f.name for f in fields(cls)]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=names)
        w.writeheader()
        for r in rows:
            w.writerow(asdict(r))


def read_records(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k, v in r.items():
            if k not in ("image", "regularized"):
                r[k] = float(v)
    return rows


def expand_grid(m_grid) -> list[tuple[float, float]]:
    """A flat list of fractions means its Cartesian square; pairs pass through."""
    items = list(m_grid)
    if items and np.ndim(items[0]) == 0:
        return [(float(a), float(b)) for a, b in itertools.product(items, items)]
    return [(float(a), float(b)) for a, b in items]


class Evaluator:
    def __init__(self, model: Codec, table: ClassTable | None = None, mode: int = MODE_PREFIX,
                 segmenter=None):
        self.model = model.eval()
        self.table = table or cityscapes_table()
        self.mode = mode
        self.segmenter = segmenter or DecodedMapSegmenter()
        self.lpips = PerceptualMetric()
        self.features = FIDFeatures()

    @torch.no_grad()
    def roundtrip(self, x: np.ndarray, labels: np.ndarray, m_x: float, m_s: float):
        """Encode, serialize, parse, decode one pair; returns (x_hat, labels_hat, blob)."""
        xt = torch.from_numpy(np.asarray(x, dtype=np.float32))[None]
        s = onehot_torch(torch.from_numpy(np.asarray(labels, dtype=np.int64))[None], self.table.n_classes)
        ix, is_ = self.model.encode(xt, s, m_x, m_s)
        ix, is_ = ix[0].numpy(), is_[0].numpy()
        H, W = labels.shape
        header = BitstreamHeader(H, W, int(np.log2(self.model.cfg.codebook_size)), self.mode,
                                 int((ix >= 0).sum()), int((is_ >= 0).sum()))
        blob = serialize(ix, is_, header)
        ix2, is2, _ = deserialize(blob)
        x_hat, labels_hat = self.model.decode(torch.from_numpy(ix2)[None], torch.from_numpy(is2)[None])
        return x_hat[0].numpy(), labels_hat[0].numpy(), blob, header

    def sweep(self, pairs, m_grid) -> EvalReport:
        grid = expand_grid(m_grid)
        report = EvalReport(config={"model": self.model.cfg.to_dict(), "mode": self.mode,
                                    "segmenter": type(self.segmenter).__name__}, grid=grid)
        J = self.model.cfg.codebook_size
        for m_x, m_s in grid:
            originals, recons = [], []
            for i, pair in enumerate(pairs):
                x, labels = pair[0], pair[1]
                name = pair[2] if len(pair) > 2 else f"img{i:04d}"
                x_hat, labels_hat, blob, header = self.roundtrip(x, labels, m_x, m_s)
                H, W = labels.shape
                seg = self.segmenter(x_hat, labels_hat)
                report.records.append(EvalRecord(
                    image=name, m_x=m_x, m_s=m_s, n_x=header.n_x, n_s=header.n_s,
                    bpp=bpp_total(m_x, m_s, J, header.K, H * W),
                    bpp_measured=payload_bits(blob) / (H * W), payload_bits=payload_bits(blob),
                    psnr=psnr(x, x_hat), lpips=float(self.lpips(x, x_hat)[0]),
                    miou=compute_miou(labels, seg)))
                originals.append(x)
                recons.append(x_hat)
            if len(originals) >= 2:
                res = fid(self.features(np.stack(originals)), self.features(np.stack(recons)))
                report.fids.append(FIDRecord(m_x, m_s, res.value, res.regularized, len(originals)))
        return report


def sweep(model: Codec, images, m_grid, **kwargs) -> EvalReport:
    """Full encode/bitstream/decode evaluation at every (m_x, m_s) grid point."""
    if model is None:
        raise FileNotFoundError("sweep needs a trained model checkpoint")
    return Evaluator(model, **kwargs).sweep(images, m_grid)


def plot_report(records_csv, out_dir) -> list[Path]:
    """mIoU-vs-m_s lines (one per m_x) and an LPIPS heatmap, read from the CSV."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = read_records(records_csv)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mx = sorted({r["m_x"] for r in rows})
    ms = sorted({r["m_s"] for r in rows})

    def mean_of(key, a, b):
        vals = [r[key] for r in rows if r["m_x"] == a and r["m_s"] == b]
        return float(np.mean(vals)) if vals else np.nan

    paths = []
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for a in mx:
        ax.plot(ms, [mean_of("miou", a, b) for b in ms], marker="o", label=f"m_x={a:g}")
    ax.set_xlabel("m_s")
    ax.set_ylabel("mIoU")
    ax.legend(fontsize=7)
    fig.tight_layout()
    paths.append(out / "miou_vs_ms.png")
    fig.savefig(paths[-1], dpi=120)
    plt.close(fig)

    grid = np.array([[mean_of("lpips", a, b) for b in ms] for a in mx])
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(grid, origin="lower", cmap="viridis", aspect="auto")
    ax.set_xticks(range(len(ms)), [f"{v:g}" for v in ms])
    ax.set_yticks(range(len(mx)), [f"{v:g}" for v in mx])
    ax.set_xlabel("m_s")
    ax.set_ylabel("m_x")
    fig.colorbar(im, ax=ax, label="LPIPS")
    fig.tight_layout()
    paths.append(out / "lpips_heatmap.png")
    fig.savefig(paths[-1], dpi=120)
    plt.close(fig)
    return paths
