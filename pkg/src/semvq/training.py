"""Three-stage training: semantic generator, image generator, joint fine-tune.

Stage ``s`` trains the semantic generator on the original maps.  Stage ``x``
trains the image generator with the decoder conditioned on the original
maps.  ``finetune`` freezes the semantic generator and adapts the image
generator to maps reconstructed by it.  Masking fractions are redrawn every
iteration.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import io
import json
import logging
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augmentation import augment_batch
from .latent_codec import CodeUsage
from .losses import LossWeights, Perceptual, adversarial_terms, residual_edit, weighted_ce, weighted_l2
from .networks import Codec, ModelConfig
from .semantic_map import ClassTable, cityscapes_table, onehot_torch

log = logging.getLogger(__name__)

DEFAULT_MASK_SET = (0.05, 0.15, 0.25, 0.35, 0.45, 0.55, 0.75, 1.0)
DEFAULT_MASK_WEIGHTS = (0.20, 0.15, 0.15, 0.15, 0.10, 0.10, 0.09, 0.06)
CHECKPOINT_FORMAT = "semvq-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    pass


class StageOrderError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch: int = 8
    epochs_stage: tuple[int, int, int] = (200, 200, 100)
    max_steps: int | None = None
    mask_set: tuple[float, ...] = DEFAULT_MASK_SET
    mask_weights: tuple[float, ...] = DEFAULT_MASK_WEIGHTS
    seed: int = 0
    early_stop_patience: int = 10
    lambda_gan: float = 1.0
    lambda_vq: float = 1.0
    lambda_commit: float = 0.25
    lambda_perc: float = 1.0
    code_restart_every: int = 20
    augment: bool = True
    wce_reduction: str = "sum"
    curve_path: str | None = None

    def __post_init__(self):
        self.epochs_stage = tuple(int(e) for e in self.epochs_stage)
        self.mask_set = tuple(float(m) for m in self.mask_set)
        self.mask_weights = tuple(float(w) for w in self.mask_weights)
        if len(self.mask_set) != len(self.mask_weights):
            raise ValueError("mask_set and mask_weights differ in length")
        if not all(0.05 <= m <= 1.0 for m in self.mask_set):
            raise ValueError("mask fractions must lie in [0.05, 1.0]")
        if any(w < 0 for w in self.mask_weights) or sum(self.mask_weights) <= 0:
            raise ValueError("mask weights must be non-negative with a positive sum")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_gan, self.lambda_vq, self.lambda_commit)

    @property
    def mask_probs(self) -> np.ndarray:
        w = np.asarray(self.mask_weights, dtype=np.float64)
        return w / w.sum()

    @property
    def mask_mean(self) -> float:
        return float(np.dot(self.mask_probs, self.mask_set))


def sample_mask_fraction(rng: np.random.Generator, cfg: TrainConfig) -> float:
    return float(cfg.mask_set[int(rng.choice(len(cfg.mask_set), p=cfg.mask_probs))])


def _parse_value(raw: str, default):
    if isinstance(default, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, tuple):
        return tuple(v.strip() for v in raw.split(",") if v.strip())
    if raw.strip().lower() in ("", "none"):
        return None
    if isinstance(default, int) or default is None and raw.strip().lstrip("-").isdigit():
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw.strip()


def load_train_config(path) -> TrainConfig:
    """Read a ``[train]`` section of ``key = value`` lines; lists are comma separated."""
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise FileNotFoundError(path)
    defaults = TrainConfig()
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    values = {}
    for key, raw in parser["train"].items() if parser.has_section("train") else []:
        if key not in known:
            raise KeyError(f"unknown train config key {key!r}")
        values[key] = _parse_value(raw, getattr(defaults, key))
    return TrainConfig(**values)


def save_train_config(cfg: TrainConfig, path) -> None:
    parser = configparser.ConfigParser()
    section = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        section[f.name] = ", ".join(str(e) for e in v) if isinstance(v, tuple) else str(v)
    parser["train"] = section
    with open(path, "w") as fh:
        parser.write(fh)


@dataclass
class Checkpoint:
    model: Codec
    stages: tuple[str, ...] = ()
    train_config: dict = field(default_factory=dict)
    history: list = field(default_factory=list)


def _codebooks(model: Codec):
    return {"codebook_x.bin": model.gx.codebook, "codebook_s.bin": model.gs.codebook}


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Zip container: manifest.json, weights.pt, codebook_{x,s}.bin."""
    model = ckpt.model
    state = {k: v for k, v in model.state_dict().items() if ".codebook." not in k}
    buf = io.BytesIO()
    torch.save(state, buf)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": model.cfg.to_dict(),
        "stages": list(ckpt.stages),
        "train_config": ckpt.train_config,
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=2))
        zf.writestr("weights.pt", buf.getvalue())
        for name, book in _codebooks(model).items():
            zf.writestr(name, book.to_bytes())


def load_checkpoint(path) -> Checkpoint:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a model checkpoint")
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")
        model = Codec(ModelConfig(**manifest["model_config"]))
        state = torch.load(io.BytesIO(zf.read("weights.pt")), weights_only=True)
        missing, unexpected = model.load_state_dict(state, strict=False)
        if unexpected or any(".codebook." not in k for k in missing):
            raise ValueError(f"checkpoint mismatch: missing={missing} unexpected={unexpected}")
        for name, book in _codebooks(model).items():
            book.load_bytes(zf.read(name))
    return Checkpoint(model, tuple(manifest["stages"]), manifest.get("train_config", {}))


def parameter_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def to_tensors(pairs, n_classes: int):
    x = torch.from_numpy(np.stack([np.asarray(p[0], dtype=np.float32) for p in pairs]))
    labels = torch.from_numpy(np.stack([np.asarray(p[1], dtype=np.int64) for p in pairs]))
    return x, onehot_torch(labels, n_classes)


class Trainer:
    """Holds optimizers, RNG streams and the per-step logic of every stage."""

    def __init__(self, model: Codec, cfg: TrainConfig, table: ClassTable | None = None):
        self.model = model
        self.cfg = cfg
        self.table = table or cityscapes_table()
        if self.table.n_classes != model.cfg.n_classes:
            raise ValueError("class table and model disagree on the number of classes")
        self.rng = np.random.default_rng(cfg.seed)
        self.lw = cfg.loss_weights
        self.perceptual = Perceptual()
        self.history: list[dict] = []
        self.probes: dict = {}
        self.step = 0
        self.usage = {
            "s": CodeUsage(model.gs.codebook, seed=cfg.seed),
            "x": CodeUsage(model.gx.codebook, seed=cfg.seed + 1),
        }

    def _track_codes(self, which, out):
        usage = self.usage[which]
        usage.update(out["indices"])
        every = self.cfg.code_restart_every
        if every and (self.step + 1) % every == 0:
            usage.restart(out["scaled"], out["selection"].selected)

    def _batches(self, pairs):
        order = self.rng.permutation(len(pairs))
        for i in range(0, len(order), self.cfg.batch):
            batch = [pairs[j][:2] for j in order[i:i + self.cfg.batch]]
            if self.cfg.augment:
                batch = augment_batch(batch, self.rng, self.table)
            yield to_tensors(batch, self.table.n_classes)

    def _check(self, stage, terms):
        if not all(np.isfinite(v) for v in terms.values()):
            raise TrainingDivergedError(f"stage {stage} step {self.step}: non-finite loss {terms}")

    # -- stage s ---------------------------------------------------------
    def step_s(self, s, m, opt_g, opt_d):
        gs, disc = self.model.gs, self.model.disc_s
        out = gs(s, m)
        probs = out["logits"].softmax(dim=1)
        wce = weighted_ce(s, out["logits"], self.table, from_logits=True, reduction=self.cfg.wce_reduction)
        l_gen = adversarial_terms(torch.zeros(()), disc(probs))[1]
        loss = wce + self.lw.gan * l_gen + self.lw.vq * out["l_vq"] + self.lw.commit * out["l_commit"]
        opt_g.zero_grad()
        loss.backward()
        opt_g.step()
        l_disc, _ = adversarial_terms(disc(s), disc(probs.detach()))
        opt_d.zero_grad()
        l_disc.backward()
        opt_d.step()
        self._track_codes("s", out)
        self.probes = {"disc_fake_input": probs.detach()}
        return dict(loss=loss.item(), rec=wce.item(), gan_g=l_gen.item(), gan_d=l_disc.item(),
                    vq=out["l_vq"].item(), commit=out["l_commit"].item())

    @torch.no_grad()
    def val_s(self, pairs, m):
        x, s = to_tensors(pairs, self.table.n_classes)
        out = self.model.gs(s, m)
        wce = weighted_ce(s, out["logits"], self.table, from_logits=True, reduction=self.cfg.wce_reduction)
        return (wce + self.lw.vq * out["l_vq"] + self.lw.commit * out["l_commit"]).item()

    # -- stage x / fine-tune ---------------------------------------------
    @torch.no_grad()
    def reconstruct_map(self, s, m_s):
        logits = self.model.gs(s, m_s)["logits"]
        return onehot_torch(logits.argmax(dim=1), self.table.n_classes).to(s.dtype)

    def step_x(self, x, s, s_cond, m, opt_g, opt_d):
        gx, disc = self.model.gx, self.model.disc_x
        out = gx(x, s, s_cond, m)
        x_hat = out["x_hat"]
        wl2 = weighted_l2(x, x_hat, s, self.table)
        perc = self.perceptual(x, x_hat)
        x_rel = residual_edit(x, x_hat, s, self.table)
        l_gen = adversarial_terms(torch.zeros(()), disc(x_rel))[1]
        loss = (wl2 + self.cfg.lambda_perc * perc + self.lw.gan * l_gen
                + self.lw.vq * out["l_vq"] + self.lw.commit * out["l_commit"])
        opt_g.zero_grad()
        loss.backward()
        opt_g.step()
        fake = x_rel.detach()
        l_disc, _ = adversarial_terms(disc(x), disc(fake))
        opt_d.zero_grad()
        l_disc.backward()
        opt_d.step()
        self._track_codes("x", out)
        self.probes = {"disc_fake_input": fake, "x_hat": x_hat.detach(), "decoder_cond": s_cond}
        return dict(loss=loss.item(), rec=wl2.item(), perc=perc.item(), gan_g=l_gen.item(),
                    gan_d=l_disc.item(), vq=out["l_vq"].item(), commit=out["l_commit"].item())

    @torch.no_grad()
    def val_x(self, pairs, m, m_s=None):
        x, s = to_tensors(pairs, self.table.n_classes)
        s_cond = s if m_s is None else self.reconstruct_map(s, m_s)
        out = self.model.gx(x, s, s_cond, m)
        total = (weighted_l2(x, out["x_hat"], s, self.table)
                 + self.cfg.lambda_perc * self.perceptual(x, out["x_hat"])
                 + self.lw.vq * out["l_vq"] + self.lw.commit * out["l_commit"])
        return total.item()

    # -- loop --------------------------------------------------------------
    def run(self, stage: str, pairs, val_pairs=None):
        cfg = self.cfg
        epochs = cfg.epochs_stage[{"s": 0, "x": 1, "finetune": 2}[stage]]
        model = self.model
        if stage == "s":
            gen, disc = model.gs, model.disc_s
        else:
            gen, disc = model.gx, model.disc_x
        opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.lr)
        opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr)
        if stage == "finetune":
            model.gs.requires_grad_(False)
            model.gs.eval()
        val_m = float(cfg.mask_set[int(np.argmin(np.abs(np.asarray(cfg.mask_set) - cfg.mask_mean)))])
        best, stale = float("inf"), 0
        self.step = 0
        for epoch in range(epochs):
            for x, s in self._batches(pairs):
                if cfg.max_steps is not None and self.step >= cfg.max_steps:
                    return
                m = sample_mask_fraction(self.rng, cfg)
                row = dict(stage=stage, epoch=epoch, step=self.step, m_x="", m_s="")
                try:
                    if stage == "s":
                        row["m_s"] = m
                        terms = self.step_s(s, m, opt_g, opt_d)
                    elif stage == "x":
                        row["m_x"] = m
                        terms = self.step_x(x, s, s, m, opt_g, opt_d)
                    else:
                        m_s = sample_mask_fraction(self.rng, cfg)
                        row.update(m_x=m, m_s=m_s)
                        terms = self.step_x(x, s, self.reconstruct_map(s, m_s), m, opt_g, opt_d)
                except FloatingPointError as err:
                    raise TrainingDivergedError(f"stage {stage} step {self.step}: {err}") from err
                self._check(stage, terms)
                row.update(terms)
                self.history.append(row)
                self.step += 1
            if val_pairs is not None:
                if stage == "s":
                    v = self.val_s(val_pairs, val_m)
                else:
                    v = self.val_x(val_pairs, val_m, val_m if stage == "finetune" else None)
                if v < best - 1e-12:
                    best, stale = v, 0
                else:
                    stale += 1
                    if stale >= cfg.early_stop_patience:
                        log.info("stage %s: early stop after epoch %d", stage, epoch)
                        return

    def write_curve(self, path) -> None:
        cols = ["stage", "epoch", "step", "m_x", "m_s", "loss", "rec", "perc", "gan_g", "gan_d", "vq", "commit"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
            w.writeheader()
            for row in self.history:
                w.writerow({c: row.get(c, "") for c in cols})


def _finish(trainer: Trainer, stages, cfg: TrainConfig) -> Checkpoint:
    if cfg.curve_path:
        trainer.write_curve(cfg.curve_path)
    return Checkpoint(trainer.model, tuple(stages), dataclasses.asdict(cfg), trainer.history)


def _fresh_model(model_cfg: ModelConfig | None, seed: int) -> Codec:
    torch.manual_seed(seed)
    return Codec(model_cfg or ModelConfig())


def train_stage_s(data, cfg: TrainConfig, model_cfg: ModelConfig | None = None, *, table=None,
                  val_data=None, model: Codec | None = None) -> Checkpoint:
    """Train the semantic generator and its discriminator on (x, labels) pairs."""
    model = model or _fresh_model(model_cfg, cfg.seed)
    trainer = Trainer(model, cfg, table)
    torch.manual_seed(cfg.seed)
    trainer.run("s", data, val_data)
    return _finish(trainer, ("s",), cfg)


def train_stage_x(data, cfg: TrainConfig, model_cfg: ModelConfig | None = None, *, table=None,
                  val_data=None, model: Codec | None = None) -> Checkpoint:
    """Train the image generator, decoder conditioned on the original maps."""
    model = model or _fresh_model(model_cfg, cfg.seed)
    trainer = Trainer(model, cfg, table)
    torch.manual_seed(cfg.seed + 1)
    trainer.run("x", data, val_data)
    return _finish(trainer, ("x",), cfg)


def merge_stages(ckpt_s: Checkpoint | None, ckpt_x: Checkpoint | None) -> Codec:
    if ckpt_s is None or "s" not in ckpt_s.stages:
        raise StageOrderError("fine-tuning needs a checkpoint with a trained semantic generator")
    if ckpt_x is None or "x" not in ckpt_x.stages:
        raise StageOrderError("fine-tuning needs a checkpoint with a trained image generator")
    if ckpt_s.model.cfg != ckpt_x.model.cfg:
        raise ValueError("stage checkpoints were built with different model configs")
    model = Codec(ckpt_s.model.cfg)
    model.gs.load_state_dict(ckpt_s.model.gs.state_dict())
    model.disc_s.load_state_dict(ckpt_s.model.disc_s.state_dict())
    model.gx.load_state_dict(ckpt_x.model.gx.state_dict())
    model.disc_x.load_state_dict(ckpt_x.model.disc_x.state_dict())
    return model


def finetune(data, cfg: TrainConfig, ckpt_s: Checkpoint, ckpt_x: Checkpoint, *, table=None,
             val_data=None) -> Checkpoint:
    """Adapt the image generator to reconstructed maps; the semantic generator stays frozen."""
    model = merge_stages(ckpt_s, ckpt_x)
    trainer = Trainer(model, cfg, table)
    torch.manual_seed(cfg.seed + 2)
    trainer.run("finetune", data, val_data)
    return _finish(trainer, ("s", "x", "finetune"), cfg)
