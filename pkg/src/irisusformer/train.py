"""Training loop, inference helpers and checkpoint save/resume."""

from __future__ import annotations

import logging
from dataclasses import astuple, dataclass, fields
from pathlib import Path
from typing import Callable, TextIO

import numpy as np

from . import config as cfgmod
from . import tensor as T
from .checkpoint import CheckpointError, read_checkpoint, write_checkpoint
from .config import RunConfig
from .data import augment, load_dataset, read_manifest
from .losses import LossFlags, one_hot, total_objective, uncertainty_map
from .metrics import MetricsReport, evaluate_masks
from .model import IrisUsformer, ModelConfig, build, predict_mask
from .optim import AdamW, LrSchedule, lr_at

log = logging.getLogger(__name__)


@dataclass
class LogRecord:
    iter: int
    lr: float
    ce_s: float
    dice_s: float
    ce_a: float
    dice_a: float
    r_kl: float
    total: float
    mean_uncertainty: float

    def to_line(self) -> str:
        return "\t".join(str(v) if isinstance(v, int) else repr(float(v)) for v in astuple(self))


LOG_FIELDS = tuple(f.name for f in fields(LogRecord))
LOG_HEADER = "\t".join(LOG_FIELDS)


def read_log(path) -> list[LogRecord]:
    rows = Path(path).read_text(encoding="utf-8").splitlines()
    out = []
    for row in rows[1:]:
        if row.strip():
            vals = row.split("\t")
            out.append(LogRecord(int(vals[0]), *map(float, vals[1:])))
    return out


def to_input(images: np.ndarray) -> np.ndarray:
    """uint8 [N, H, W] or [N, H, W, 3] -> float [N, C, H, W] in [0, 1]."""
    x = np.asarray(images, dtype=np.float64) / 255.0
    return x[:, None] if x.ndim == 3 else np.moveaxis(x, -1, 1)


def schedule_of(cfg: RunConfig) -> LrSchedule:
    t = cfg.train
    return LrSchedule(t.lr_min, t.lr_max, t.cycle_length, t.policy)


class Trainer:
    def __init__(self, cfg: RunConfig, images: np.ndarray, masks: np.ndarray):
        cfg.validate()
        if len(images) == 0:
            raise ValueError("training set is empty")
        self.cfg = cfg
        self.images, self.masks = np.asarray(images), np.asarray(masks)
        self.model = build(cfg.model)
        self.model.train()
        t = cfg.train
        self.optimizer = AdamW(dict(self.model.named_parameters()), (t.beta1, t.beta2), t.adam_eps,
                               t.weight_decay)
        self.schedule = schedule_of(cfg)
        self.flags = LossFlags(without_u=t.without_u, variant=t.variant)
        self.iteration = 0

    def batch(self, iteration: int) -> tuple[np.ndarray, np.ndarray]:
        """Deterministic batch for ``iteration``: selection and augmentation
        draw only from generators seeded by (seed, iteration[, slot])."""
        n, b = len(self.images), self.cfg.train.batch_size
        rng = np.random.default_rng([self.cfg.seed, iteration])
        idx = rng.permutation(n)[:b] if b <= n else rng.integers(0, n, size=b)
        imgs, msks = [], []
        for slot, i in enumerate(idx):
            img, msk = self.images[i], self.masks[i]
            if self.cfg.train.augment:
                img, msk = augment(img, msk, np.random.default_rng([self.cfg.seed, iteration, slot]))
            imgs.append(img)
            msks.append(msk)
        return to_input(np.stack(imgs)), np.stack(msks)

    def step(self) -> LogRecord:
        x, y = self.batch(self.iteration)
        lr = lr_at(self.schedule, self.iteration)
        self.model.train()
        self.optimizer.zero_grad()
        pair = self.model(T.Tensor(x))
        loss, rep, _ = total_objective(pair, one_hot(y, self.cfg.model.num_classes),
                                       self.cfg.train.alpha, self.cfg.train.epsilon, self.flags)
        T.backward(loss)
        self.optimizer.step(lr)
        rec = LogRecord(self.iteration, lr, rep.ce_s, rep.dice_s, rep.ce_a, rep.dice_a, rep.r_kl,
                        rep.total, rep.mean_uncertainty)
        self.iteration += 1
        return rec

    def run(self, iterations: int, log_file: TextIO | None = None, checkpoint_path=None,
            checkpoint_every: int = 0, callback: Callable[[LogRecord], None] | None = None) -> list[LogRecord]:
        records = []
        for _ in range(iterations):
            rec = self.step()
            records.append(rec)
            if log_file is not None:
                log_file.write(rec.to_line() + "\n")
                log_file.flush()
            if callback is not None:
                callback(rec)
            if checkpoint_path and checkpoint_every and self.iteration % checkpoint_every == 0:
                self.save(checkpoint_path)
            if rec.iter % 50 == 0:
                log.info("iter %d lr %.2e loss %.4f", rec.iter, rec.lr, rec.total)
        return records

    # -- checkpoints ---------------------------------------------------------
    def save(self, path):
        header = {
            "format": "irisusformer-checkpoint",
            "config": cfgmod.to_dict(self.cfg),
            "iteration": self.iteration,
            "rng": {"seed": self.cfg.seed, "next_iteration": self.iteration},
            "optimizer_step": self.optimizer.step_count,
        }
        tensors = {f"param/{k}": v for k, v in self.model.state_dict().items()}
        tensors.update({f"adam_m/{k}": v for k, v in self.optimizer.m.items()})
        tensors.update({f"adam_v/{k}": v for k, v in self.optimizer.v.items()})
        write_checkpoint(path, header, tensors)

    @classmethod
    def resume(cls, path, images: np.ndarray, masks: np.ndarray,
               expected: RunConfig | None = None) -> "Trainer":
        header, tensors = read_checkpoint(path)
        cfg = cfgmod.from_dict(header["config"])
        if expected is not None and cfgmod.to_dict(expected.model) != cfgmod.to_dict(cfg.model):
            raise CheckpointError("checkpoint model config does not match the requested model")
        trainer = cls(expected or cfg, images, masks)
        trainer.model.load_state_dict(_section(tensors, "param/"))
        m, v = _section(tensors, "adam_m/"), _section(tensors, "adam_v/")
        for k in trainer.optimizer.m:
            trainer.optimizer.m[k] = m[k].copy()
            trainer.optimizer.v[k] = v[k].copy()
        trainer.optimizer.step_count = header["optimizer_step"]
        trainer.iteration = header["iteration"]
        return trainer


def _section(tensors: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}


def load_model(path, expected: ModelConfig | None = None) -> tuple[IrisUsformer, RunConfig]:
    header, tensors = read_checkpoint(path)
    cfg = cfgmod.from_dict(header["config"])
    if expected is not None and cfgmod.to_dict(expected) != cfgmod.to_dict(cfg.model):
        raise CheckpointError("checkpoint model config does not match the requested model")
    model = build(cfg.model)
    model.load_state_dict(_section(tensors, "param/"))
    model.eval()
    return model, cfg


@dataclass
class Inference:
    seg: np.ndarray      # [N, C, H, W]
    aux: np.ndarray | None
    masks: np.ndarray    # [N, H, W]
    uncertainty: np.ndarray | None  # [N, H, W]


def infer(model: IrisUsformer, images: np.ndarray, batch_size: int = 8, with_aux: bool = True,
          variant: str = "normalized") -> Inference:
    """Eval-mode predictions without recording a graph."""
    model.eval()
    segs, auxs, unc = [], [], []
    with T.no_grad():
        for s in range(0, len(images), batch_size):
            pair = model(T.Tensor(to_input(images[s:s + batch_size])), with_aux=with_aux)
            segs.append(pair.seg.data)
            if with_aux:
                auxs.append(pair.aux.data)
                unc.append(uncertainty_map(pair.seg, pair.aux, variant).values.data)
    seg = np.concatenate(segs)
    return Inference(seg, np.concatenate(auxs) if with_aux else None, predict_mask(seg),
                     np.concatenate(unc) if with_aux else None)


def evaluate(model: IrisUsformer, images: np.ndarray, masks: np.ndarray, names=None,
             pooled: bool = False) -> MetricsReport:
    pred = infer(model, images, with_aux=False).masks
    return evaluate_masks(list(pred), list(masks), names, pooled)


def train(cfg: RunConfig, manifest_path, iterations: int | None = None, batch: int | None = None,
          out_dir=None, resume=None) -> tuple[Trainer, list[LogRecord]]:
    """Train from a manifest, writing ``train_log.tsv`` and ``checkpoint.bin`` to ``out_dir``.

    With ``resume`` the run continues from that checkpoint up to the configured
    iteration count; log rows past the checkpoint are discarded first so the
    final log matches an uninterrupted run.
    """
    cfg = cfgmod.from_dict(cfgmod.to_dict(cfg))
    if iterations is not None:
        cfg.train.iterations = iterations
    if batch is not None:
        cfg.train.batch_size = batch
    manifest = read_manifest(manifest_path)
    if len(manifest) == 0:
        raise ValueError(f"{manifest_path}: manifest is empty")
    images, masks = load_dataset(manifest, cfg.model.in_channels)
    out = Path(out_dir or cfg.resolved_out_dir())
    out.mkdir(parents=True, exist_ok=True)
    ckpt, log_path = out / "checkpoint.bin", out / "train_log.tsv"
    if resume is not None:
        trainer = Trainer.resume(resume, images, masks, expected=cfg)
        kept = [r for r in read_log(log_path) if r.iter < trainer.iteration] if log_path.exists() else []
    else:
        trainer = Trainer(cfg, images, masks)
        kept = []
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write(LOG_HEADER + "\n")
        for r in kept:
            fh.write(r.to_line() + "\n")
        remaining = max(0, cfg.train.iterations - trainer.iteration)
        records = kept + trainer.run(remaining, fh, ckpt, cfg.train.checkpoint_every)
    trainer.save(ckpt)
    return trainer, records
