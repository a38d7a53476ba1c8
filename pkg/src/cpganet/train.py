"""Adam, cosine annealing with warm restarts, and the supervised training loop."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .data import BatchPlan, full_images, make_batches
from .losses import LOSS_NAMES, FeatureExtractor, LossSpec, psnr, ssim_metric, total_loss
from .model import (
    CPGANetPlus,
    ModelConfig,
    check_input,
    encode_checkpoint,
    load_state,
    read_checkpoint,
    state_dict,
    write_atomic,
)

log = logging.getLogger(__name__)

LR_PRESETS = {"lolv1": 1e-3, "lolv2-syn": 1e-3, "lolv2-real": 1e-4}


class NonFiniteLossError(RuntimeError):
    pass


# -------------------------------------------------------------------- Adam
@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: list[tuple[str, Parameter]], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place. Missing grads count as zero."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ad.ShapeError(f"{name}: grad shape {g.shape} vs parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if m.shape != p.shape:
            raise ad.ShapeError(f"{name}: moment shape {m.shape} vs parameter {p.shape}")
        dt = p.dtype.type
        m *= dt(b1)
        m += dt(1 - b1) * g
        v *= dt(b2)
        v += dt(1 - b2) * (g * g)
        p.data -= dt(lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(state.eps))


# ---------------------------------------------------------------- schedule
@dataclass
class Schedule:
    """Cosine annealing restarted every ``cycle`` epochs.

    ``lr(e) = min_lr + (base_lr - min_lr) * (1 + cos(pi * (e mod cycle) / cycle)) / 2``
    """

    base_lr: float = 1e-3
    epochs: int = 600
    cycle: int = 67
    min_lr: float = 0.0

    def lr_at(self, epoch: int) -> float:
        if not 0 <= epoch < self.epochs:
            raise ValueError(f"epoch {epoch} outside [0, {self.epochs})")
        phase = (epoch % self.cycle) / self.cycle
        return self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + math.cos(math.pi * phase))


def lr_at(schedule: Schedule, epoch: int) -> float:
    return schedule.lr_at(epoch)


# ------------------------------------------------------------------- run
@dataclass
class LogRecord:
    epoch: int
    step: int
    components: dict[str, float]
    total: float
    lr: float

    def line(self) -> str:
        comps = [_fmt(self.components[n]) if n in self.components else "-" for n in LOSS_NAMES]
        return "\t".join([str(self.epoch), str(self.step), *comps, _fmt(self.total), _fmt(self.lr)])


LOG_HEADER = "#epoch\tstep\t" + "\t".join(LOSS_NAMES) + "\ttotal\tlr"


def _fmt(x: float) -> str:
    return repr(float(x))


@dataclass
class TrainRun:
    dataset: object
    config: ModelConfig = field(default_factory=ModelConfig)
    loss: LossSpec = field(default_factory=LossSpec)
    schedule: Schedule = field(default_factory=Schedule)
    batch_size: int = 8
    crop_size: int = 256
    seed: int = 0
    max_steps: Optional[int] = None
    out_dir: Optional[str] = None
    checkpoint_every: int = 10
    val_dataset: Optional[object] = None
    val_every: int = 10
    extractor: Optional[FeatureExtractor] = None
    log_every: int = 10


@dataclass
class Progress:
    epoch: int = 0
    batch: int = 0
    step: int = 0


class Trainer:
    """Owns the model, optimizer state and log of one training run."""

    def __init__(self, run: TrainRun, model: Optional[CPGANetPlus] = None):
        if len(run.dataset) == 0:
            raise ValueError("training dataset is empty")
        self.run = run
        self.model = model or CPGANetPlus(run.config)
        self.adam = AdamState()
        self.progress = Progress()
        self.log: list[LogRecord] = []
        self.best_psnr = -math.inf
        self.history: list[dict] = []

    # ---------------------------------------------------------------- steps
    def _plan(self, epoch: int) -> BatchPlan:
        return BatchPlan(self.run.batch_size, self.run.crop_size, self.run.seed, epoch)

    def train_step(self, low: Tensor, gt: Tensor, lr: float) -> LogRecord:
        params = self.model.named_parameters()
        self.model.zero_grad()
        y = self.model(low)
        comps: dict[str, Tensor] = {}
        loss = total_loss(y, gt, self.run.loss, self.run.extractor, comps)
        total = float(loss.data)
        record = LogRecord(self.progress.epoch, self.progress.step + 1,
                           {k: float(v.data) for k, v in comps.items()}, total, lr)
        if not all(math.isfinite(x) for x in [total, *record.components.values()]):
            self._append(record)
            raise NonFiniteLossError(f"non-finite loss at epoch {record.epoch} step {record.step}: {record.line()}")
        loss.backward()
        adam_step(params, self.adam, lr)
        self.progress.step += 1
        self._append(record)
        if self.run.log_every and record.step % self.run.log_every == 0:
            log.info("epoch %d step %d: total %.5f lr %.3g", record.epoch, record.step, record.total, lr)
        return record

    def _append(self, record: LogRecord) -> None:
        self.log.append(record)
        if self.run.out_dir:
            path = os.path.join(self.run.out_dir, "train.log")
            new = not os.path.exists(path)
            with open(path, "a") as fh:
                if new:
                    fh.write(LOG_HEADER + "\n")
                fh.write(record.line() + "\n")

    def train(self) -> "Trainer":
        """Run until ``max_steps`` or the end of the schedule, whichever is first."""
        run = self.run
        if run.out_dir:
            os.makedirs(run.out_dir, exist_ok=True)
        while self.progress.epoch < run.schedule.epochs:
            epoch = self.progress.epoch
            lr = run.schedule.lr_at(epoch)
            for b, (low, gt, _) in enumerate(make_batches(run.dataset, self._plan(epoch))):
                if b < self.progress.batch:
                    continue
                if self._done():
                    return self._finish()
                self.train_step(low, gt, lr)
                self.progress.batch = b + 1
            if self._done():
                return self._finish()
            self._end_of_epoch(epoch)
            self.progress.epoch += 1
            self.progress.batch = 0
        return self._finish()

    def _done(self) -> bool:
        return self.run.max_steps is not None and self.progress.step >= self.run.max_steps

    def _end_of_epoch(self, epoch: int) -> None:
        run = self.run
        if run.val_dataset is not None and (epoch + 1) % run.val_every == 0:
            p, s = evaluate(self.model, run.val_dataset)
            self.history.append({"epoch": epoch, "psnr": p, "ssim": s})
            log.info("epoch %d: val PSNR %.3f dB, SSIM %.4f", epoch, p, s)
            if p > self.best_psnr:
                self.best_psnr = p
                if run.out_dir:
                    self.save(os.path.join(run.out_dir, "best.ckpt"),
                              progress=Progress(epoch + 1, 0, self.progress.step))
        if run.out_dir and (epoch + 1) % run.checkpoint_every == 0:
            self.save(os.path.join(run.out_dir, "last.ckpt"), progress=Progress(epoch + 1, 0, self.progress.step))

    def _finish(self) -> "Trainer":
        if self.run.out_dir:
            self.save(os.path.join(self.run.out_dir, "last.ckpt"))
        return self

    # ---------------------------------------------------------- persistence
    def save(self, path: str, progress: Optional[Progress] = None) -> None:
        progress = progress or self.progress
        tensors = dict(state_dict(self.model))
        for name in tensors.copy():
            if name in self.adam.m:
                tensors[f"adam.m.{name}"] = self.adam.m[name]
                tensors[f"adam.v.{name}"] = self.adam.v[name]
        meta = {
            "epoch": progress.epoch,
            "batch": progress.batch,
            "step": progress.step,
            "adam_step": self.adam.step,
            "seed": self.run.seed,
            "best_psnr": self.best_psnr if math.isfinite(self.best_psnr) else None,
        }
        header = {"config": self.model.config.to_dict(), "meta": meta}
        write_atomic(path, encode_checkpoint(header, tensors))

    @classmethod
    def resume(cls, path: str, run: TrainRun) -> "Trainer":
        """Continue a run from a checkpoint written by :meth:`save`.

        The data order is a pure function of (seed, epoch), so restoring the
        position within the epoch reproduces the uninterrupted run bit-exactly.
        """
        ckpt = read_checkpoint(path)
        run.config = ckpt.config
        trainer = cls(run)
        weights = {k: v for k, v in ckpt.tensors.items() if not k.startswith("adam.")}
        load_state(trainer.model, weights)
        meta = ckpt.header.get("meta", {})
        for name, _ in trainer.model.named_parameters():
            if f"adam.m.{name}" in ckpt.tensors:
                trainer.adam.m[name] = ckpt.tensors[f"adam.m.{name}"].copy()
                trainer.adam.v[name] = ckpt.tensors[f"adam.v.{name}"].copy()
        trainer.adam.step = int(meta.get("adam_step", 0))
        trainer.progress = Progress(int(meta.get("epoch", 0)), int(meta.get("batch", 0)), int(meta.get("step", 0)))
        if meta.get("best_psnr") is not None:
            trainer.best_psnr = float(meta["best_psnr"])
        return trainer


def train(run: TrainRun) -> Trainer:
    return Trainer(run).train()


# --------------------------------------------------------------- inference
def enhance_array(model: CPGANetPlus, img: np.ndarray) -> np.ndarray:
    """Enhance one ``[1, 3, H, W]`` image of any size >= 16.

    Odd sizes are reflect-padded to even and cropped back afterwards.
    """
    h, w = img.shape[-2:]
    ph, pw = h % 2, w % 2
    x = np.pad(img, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect") if (ph or pw) else img
    dtype = model.parameters()[0].dtype
    with ad.no_grad():
        t = Tensor._wrap(np.asarray(x, dtype=dtype))
        check_input(t)
        y = model(t).data
    return y[:, :, :h, :w]


def evaluate(model: CPGANetPlus, dataset) -> tuple[float, float]:
    """Mean PSNR and SSIM over full-resolution pairs."""
    ps, ss = [], []
    for sample in full_images(dataset):
        y = enhance_array(model, sample.low)
        ps.append(psnr(y, sample.gt))
        ss.append(ssim_metric(y, sample.gt))
    return float(np.mean(ps)), float(np.mean(ss))
