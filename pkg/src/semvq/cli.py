"""Command-line front end.

Exit codes: 0 success, 2 usage error, 3 input/output error, 4 model error.
Relative checkpoint paths that do not exist are also looked up in
``$SEMVQ_CKPT_DIR``; with no ``--ckpt`` at all, ``$SEMVQ_CKPT_DIR/model.ckpt``
is used.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import zipfile
from pathlib import Path

import numpy as np
import torch

from .bitstream import MODE_PREFIX, BitstreamError, BitstreamHeader, deserialize, serialize
from .data import load_pairs, read_image_png, save_pairs, synthetic_dataset, write_image_png
from .evaluate import Evaluator, SegmenterError, SubprocessSegmenter, plot_report
from .networks import ModelConfig, desk_config
from .semantic_map import (
    InvalidClassError,
    cityscapes_table,
    onehot_torch,
    read_label_png,
    validate_labels,
    write_color_png,
    write_label_png,
)
from .training import (
    Checkpoint,
    StageOrderError,
    TrainConfig,
    TrainingDivergedError,
    finetune,
    load_checkpoint,
    load_train_config,
    save_checkpoint,
    train_stage_s,
    train_stage_x,
)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_MODEL = 0, 2, 3, 4
CKPT_ENV = "SEMVQ_CKPT_DIR"

log = logging.getLogger("semvq")


class UsageError(Exception):
    pass


class ModelError(Exception):
    pass


def resolve_ckpt(path: str | None) -> Path:
    env = os.environ.get(CKPT_ENV)
    if path is None:
        if not env:
            raise UsageError(f"no --ckpt given and {CKPT_ENV} is not set")
        return Path(env) / "model.ckpt"
    p = Path(path)
    if not p.exists() and not p.is_absolute() and env and (Path(env) / p).exists():
        return Path(env) / p
    return p


def _load_ckpt(path) -> Checkpoint:
    p = resolve_ckpt(path)
    if not p.exists():
        raise FileNotFoundError(f"checkpoint {p} not found")
    try:
        return load_checkpoint(p)
    except (zipfile.BadZipFile, KeyError, ValueError, RuntimeError) as e:
        raise ModelError(f"cannot load checkpoint {p}: {e}") from e


def _load_model(path):
    return _load_ckpt(path).model.eval()


def _fraction(text: str) -> float:
    v = float(text)
    if not 0.0 < v <= 1.0:
        raise argparse.ArgumentTypeError(f"masking fraction must lie in (0, 1], got {v}")
    return v


def _train_config(args) -> TrainConfig:
    cfg = load_train_config(args.config) if args.config else TrainConfig()
    for key in ("lr", "batch", "seed", "max_steps"):
        v = getattr(args, key, None)
        if v is not None:
            setattr(cfg, key, v)
    if args.epochs is not None:
        cfg.epochs_stage = (args.epochs,) * 3
    if args.no_augment:
        cfg.augment = False
    if args.curve:
        cfg.curve_path = args.curve
    return cfg


def cmd_encode(args) -> int:
    model = _load_model(args.ckpt)
    table = cityscapes_table()
    x = read_image_png(args.image)
    labels = read_label_png(args.ssm)
    validate_labels(labels, table)
    if x.shape[1:] != labels.shape:
        raise UsageError(f"image {x.shape[1:]} and label map {labels.shape} differ in size")
    H, W = labels.shape
    if H % 16 or W % 16:
        raise UsageError(f"image size {H}x{W} is not a multiple of 16")
    xt = torch.from_numpy(x)[None]
    s = onehot_torch(torch.from_numpy(labels)[None], table.n_classes)
    ix, is_ = model.encode(xt, s, args.mx, args.ms)
    ix, is_ = ix[0].numpy(), is_[0].numpy()
    header = BitstreamHeader(H, W, int(np.log2(model.cfg.codebook_size)), args.mode,
                             int((ix >= 0).sum()), int((is_ >= 0).sum()))
    blob = serialize(ix, is_, header)
    Path(args.out).write_bytes(blob)
    print(f"{args.out}: {len(blob)} bytes, N_x={header.n_x} N_s={header.n_s} K={header.K}")
    if args.preview:
        x_hat, l_hat = model.decode(torch.from_numpy(ix)[None], torch.from_numpy(is_)[None])
        stem = Path(args.preview)
        write_image_png(stem.with_name(stem.name + "_image.png"), x_hat[0].numpy())
        write_label_png(stem.with_name(stem.name + "_labels.png"), l_hat[0].numpy())
    return EXIT_OK


def cmd_decode(args) -> int:
    model = _load_model(args.ckpt)
    ix, is_, header = deserialize(Path(args.bitstream).read_bytes())
    if header.J != model.cfg.codebook_size:
        raise ModelError(f"bitstream uses J={header.J}, model has J={model.cfg.codebook_size}")
    x_hat, labels = model.decode(torch.from_numpy(ix)[None], torch.from_numpy(is_)[None])
    stem = Path(args.bitstream).with_suffix("")
    out_image = Path(args.out_image or f"{stem}_decoded.png")
    out_labels = Path(args.out_labels or f"{stem}_decoded_labels.png")
    write_image_png(out_image, x_hat[0].numpy())
    write_label_png(out_labels, labels[0].numpy())
    if args.color:
        write_color_png(args.color, labels[0].numpy(), cityscapes_table())
    print(f"wrote {out_image} and {out_labels}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _train_config(args)
    pairs = load_pairs(args.data)
    val = load_pairs(args.val) if args.val else None
    init = _load_ckpt(args.init) if args.init else None
    model_cfg = desk_config() if args.model == "desk" else ModelConfig()
    fn = train_stage_s if args.stage == "s" else train_stage_x
    ckpt = fn(pairs, cfg, model_cfg, val_data=val, model=init.model if init else None)
    if init is not None:
        ckpt.stages = tuple(dict.fromkeys(init.stages + ckpt.stages))
    save_checkpoint(ckpt, args.out)
    last = ckpt.history[-1]["loss"] if ckpt.history else float("nan")
    print(f"stage {args.stage}: {len(ckpt.history)} steps, final loss {last:.6g}, saved {args.out}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _train_config(args)
    pairs = load_pairs(args.data)
    val = load_pairs(args.val) if args.val else None
    ckpt = finetune(pairs, cfg, _load_ckpt(args.ckpt_s), _load_ckpt(args.ckpt_x), val_data=val)
    save_checkpoint(ckpt, args.out)
    print(f"fine-tune: {len(ckpt.history)} steps, saved {args.out}")
    return EXIT_OK


def _run_eval(args, grid) -> int:
    model = _load_model(args.ckpt)
    pairs = load_pairs(args.data)
    seg = SubprocessSegmenter(args.segmenter) if args.segmenter else None
    report = Evaluator(model, mode=args.mode, segmenter=seg).sweep(pairs, grid)
    paths = report.write(args.out)
    if not args.no_plots:
        plot_report(paths["records"], args.out)
    print(f"{len(report.records)} records, {len(report.fids)} FID values -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    return _run_eval(args, [(args.mx, args.ms)])


def cmd_sweep(args) -> int:
    return _run_eval(args, [_fraction(v) for v in args.grid.split(",")])


def cmd_synth(args) -> int:
    pairs = synthetic_dataset(args.n, seed=args.seed, H=args.height, W=args.width)
    names = save_pairs(args.out, pairs)
    print(f"wrote {len(names)} pairs to {args.out}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="semvq", description="Semantic masked-VQ image and label-map codec.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    e = sub.add_parser("encode", help="image + label map -> .sqb bitstream")
    e.add_argument("--image", required=True)
    e.add_argument("--ssm", required=True, help="8-bit label PNG")
    e.add_argument("--mx", type=_fraction, required=True)
    e.add_argument("--ms", type=_fraction, required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--ckpt")
    e.add_argument("--mode", type=int, choices=(0, 1, 2), default=MODE_PREFIX,
                   help="payload coding: 0 fixed width, 1 arithmetic, 2 prefix (default)")
    e.add_argument("--preview", help="path stem for reconstructed previews")
    e.set_defaults(func=cmd_encode)

    d = sub.add_parser("decode", help=".sqb -> image PNG + label PNG")
    d.add_argument("bitstream")
    d.add_argument("--ckpt")
    d.add_argument("--out-image")
    d.add_argument("--out-labels")
    d.add_argument("--color", help="also write a palette-coloured label image")
    d.set_defaults(func=cmd_decode)

    def training_flags(q):
        q.add_argument("--data", required=True, help="directory of <name>.png / <name>_labels.png")
        q.add_argument("--val", help="validation directory; enables early stopping")
        q.add_argument("--out", required=True, help="output checkpoint")
        q.add_argument("--config", help="INI file with a [train] section")
        q.add_argument("--lr", type=float)
        q.add_argument("--batch", type=int)
        q.add_argument("--seed", type=int)
        q.add_argument("--epochs", type=int)
        q.add_argument("--max-steps", dest="max_steps", type=int)
        q.add_argument("--no-augment", action="store_true")
        q.add_argument("--curve", help="training-curve CSV")

    t = sub.add_parser("train", help="train the semantic (s) or image (x) stage")
    t.add_argument("--stage", choices=("s", "x"), required=True)
    t.add_argument("--model", choices=("desk", "full"), default="desk")
    t.add_argument("--init", help="start from this checkpoint")
    training_flags(t)
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("finetune", help="adapt the image stage to reconstructed maps")
    f.add_argument("--ckpt-s", required=True)
    f.add_argument("--ckpt-x", required=True)
    training_flags(f)
    f.set_defaults(func=cmd_finetune)

    def eval_flags(q):
        q.add_argument("--data", required=True)
        q.add_argument("--ckpt")
        q.add_argument("--out", required=True, help="report directory")
        q.add_argument("--mode", type=int, choices=(0, 1, 2), default=MODE_PREFIX)
        q.add_argument("--segmenter", help="external command: '{input}' RGB PNG -> '{output}' label PNG")
        q.add_argument("--no-plots", action="store_true")

    ev = sub.add_parser("eval", help="metrics at one (m_x, m_s) point")
    ev.add_argument("--mx", type=_fraction, required=True)
    ev.add_argument("--ms", type=_fraction, required=True)
    eval_flags(ev)
    ev.set_defaults(func=cmd_eval)

    sw = sub.add_parser("sweep", help="metrics over a square grid of fractions")
    sw.add_argument("--grid", default="0.2,0.55,0.95", help="comma-separated fractions")
    eval_flags(sw)
    sw.set_defaults(func=cmd_sweep)

    sy = sub.add_parser("synth", help="write a synthetic street-scene dataset")
    sy.add_argument("--out", required=True)
    sy.add_argument("--n", type=int, default=8)
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--height", type=int, default=64)
    sy.add_argument("--width", type=int, default=128)
    sy.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (UsageError, argparse.ArgumentTypeError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, BitstreamError, InvalidClassError, SegmenterError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ModelError, StageOrderError, TrainingDivergedError, ValueError, RuntimeError) as e:
        print(f"model error: {e}", file=sys.stderr)
        return EXIT_MODEL


if __name__ == "__main__":
    sys.exit(main())
