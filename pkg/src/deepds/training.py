"""Supervised and conditional-adversarial training drivers."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .checkpoint import (
    CheckpointError,
    load_checkpoint,
    read_checkpoint,
    restore_optimizer,
    save_checkpoint,
)
from .losses import LossSpec, cgan_losses, supervised_loss
from .networks import DownscalingModel, Discriminator, collate, set_mode
from .preprocessing import SamplePair, SampleSet, split_samples

logger = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TrainReport",
    "DivergenceError",
    "SupervisedTrainer",
    "CGANTrainer",
    "supervised_train",
    "cgan_train",
    "save_checkpoint",
    "load_checkpoint",
]

SUPERVISED_LR = 1e-4
CGAN_LR = 2e-4


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    learning_rate: float | None = None
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    loss: LossSpec = field(default_factory=LossSpec)
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate is not None and self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")

    def lr(self, default: float) -> float:
        return default if self.learning_rate is None else self.learning_rate


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    checkpoint_path: str | None = None
    d_steps: list[float] = field(default_factory=list)
    g_steps: list[float] = field(default_factory=list)

    @property
    def train_loss(self) -> list[float]:
        return [e["train_loss"] for e in self.epochs]

    @property
    def val_loss(self) -> list[float]:
        return [e["val_loss"] for e in self.epochs]

    def to_text(self) -> str:
        extra = [k for k in ("d_loss", "g_loss") if self.epochs and k in self.epochs[0]]
        cols = ["epoch", "train_loss", "val_loss"] + extra + ["seconds"]
        lines = ["\t".join(cols)]
        for e in self.epochs:
            row = [str(e["epoch"])] + [f"{e[c]:.6g}" for c in cols[1:]]
            lines.append("\t".join(row))
        return "\n".join(lines) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_text())
        return path


def _check_train_split(samples):
    if getattr(samples, "split", "train") not in ("train", "validation"):
        raise ValueError(f"trainer only accepts the training split, got {samples.split!r}")
    if len(samples) == 0:
        raise ValueError("no training samples")


def _epoch_seed(seed: int, epoch: int) -> int:
    return (seed * 1_000_003 + epoch) % (2**63 - 1)


def _batches(n: int, batch_size: int, seed: int, epoch: int):
    order = np.random.default_rng([seed, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _finite(value: torch.Tensor) -> bool:
    return bool(torch.isfinite(value).all())


class _Trainer:
    default_lr = SUPERVISED_LR

    def __init__(self, model: DownscalingModel, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.dtype = next(model.parameters()).dtype
        self.report = TrainReport()
        self.epochs_done = 0

    def _adam(self, module, lr):
        return torch.optim.Adam(
            module.parameters(), lr=lr, betas=(self.cfg.adam_beta1, self.cfg.adam_beta2), eps=self.cfg.adam_eps
        )

    def _prepare(self, samples, val_samples):
        _check_train_split(samples)
        if val_samples is None:
            if isinstance(samples, SampleSet):
                samples, val_samples = split_samples(samples, self.cfg.val_fraction)
            else:
                val_samples = []
        probe = collate([samples[0]], self.dtype)
        self.model.check_input(probe["lr"], probe["statics"])
        return list(samples), list(val_samples)

    def validate(self, val_samples: Sequence[SamplePair]) -> float:
        if not val_samples:
            return float("nan")
        set_mode(self.model, "infer")
        total, count = 0.0, 0
        with torch.no_grad():
            for start in range(0, len(val_samples), self.cfg.batch_size):
                chunk = val_samples[start : start + self.cfg.batch_size]
                b = collate(chunk, self.dtype)
                pred = self.model(b["lr"], b["statics"])
                total += float(supervised_loss(pred, b["target"], b["mask"], self.cfg.loss)) * len(chunk)
                count += len(chunk)
        return total / count

    def _checkpoint(self, epoch: int, final: bool = False):
        cfg = self.cfg
        if not cfg.checkpoint_dir:
            return
        due = cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0
        if not (due or final):
            return
        path = Path(cfg.checkpoint_dir) / "last"
        self.save(path)
        if due:
            self.save(Path(cfg.checkpoint_dir) / f"epoch_{epoch:04d}")
        self.report.checkpoint_path = str(path)

    def _meta(self):
        return {
            "epochs_done": self.epochs_done,
            "history": self.report.epochs,
            "d_steps": self.report.d_steps,
            "g_steps": self.report.g_steps,
            "trainer": type(self).__name__,
        }

    def _restore_meta(self, meta):
        self.epochs_done = int(meta.get("epochs_done", 0))
        self.report.epochs = list(meta.get("history", []))
        self.report.d_steps = list(meta.get("d_steps", []))
        self.report.g_steps = list(meta.get("g_steps", []))

    def fit(self, samples, val_samples=None) -> TrainReport:
        samples, val_samples = self._prepare(samples, val_samples)
        for epoch in range(self.epochs_done + 1, self.cfg.epochs + 1):
            t0 = time.perf_counter()
            torch.manual_seed(_epoch_seed(self.cfg.seed, epoch))
            row = self._run_epoch(samples, epoch)
            row["val_loss"] = self.validate(val_samples)
            row["epoch"] = epoch
            row["seconds"] = time.perf_counter() - t0
            self.report.epochs.append(row)
            self.epochs_done = epoch
            logger.info("epoch %d train %.5g val %.5g", epoch, row["train_loss"], row["val_loss"])
            self._checkpoint(epoch, final=epoch == self.cfg.epochs)
        return self.report


class SupervisedTrainer(_Trainer):
    def __init__(self, model: DownscalingModel, cfg: TrainConfig):
        super().__init__(model, cfg)
        self.optimizer = self._adam(model, cfg.lr(SUPERVISED_LR))

    def _run_epoch(self, samples, epoch):
        set_mode(self.model, "train")
        total = 0.0
        for b_idx, idx in enumerate(_batches(len(samples), self.cfg.batch_size, self.cfg.seed, epoch)):
            b = collate([samples[i] for i in idx], self.dtype)
            pred = self.model(b["lr"], b["statics"])
            loss = supervised_loss(pred, b["target"], b["mask"], self.cfg.loss)
            if not _finite(loss):
                raise DivergenceError(f"diverged at epoch {epoch} batch {b_idx}")
            self.optimizer.zero_grad()
            loss.backward()
            self.optimizer.step()
            total += loss.item() * len(idx)
        return {"train_loss": total / len(samples)}

    def save(self, path) -> Path:
        return save_checkpoint(
            self.model, path, optimizers={"generator": (self.optimizer, self.model)}, meta=self._meta()
        )

    def resume(self, path) -> "SupervisedTrainer":
        ckpt = read_checkpoint(path)
        if ckpt.spec != self.model.spec:
            raise CheckpointError("spec mismatch: checkpoint and model architectures differ")
        self.model.load_state_dict(ckpt.group("model"))
        restore_optimizer(self.optimizer, self.model, ckpt.group("optim_generator"))
        self._restore_meta(ckpt.meta)
        return self


class CGANTrainer(_Trainer):
    """Alternating updates: one discriminator step, then one generator step, per minibatch."""

    def __init__(self, generator: DownscalingModel, discriminator: Discriminator, cfg: TrainConfig):
        super().__init__(generator, cfg)
        self.discriminator = discriminator.to(self.dtype)
        lr = cfg.lr(CGAN_LR)
        self.opt_g = self._adam(generator, lr)
        self.opt_d = self._adam(discriminator, lr)

    def _run_epoch(self, samples, epoch):
        set_mode(self.model, "train")
        set_mode(self.discriminator, "train")
        lam = self.cfg.loss.adversarial_lambda
        g_total = d_total = 0.0
        for b_idx, idx in enumerate(_batches(len(samples), self.cfg.batch_size, self.cfg.seed, epoch)):
            b = collate([samples[i] for i in idx], self.dtype)
            maskf = b["mask"].to(self.dtype)
            fake = self.model(b["lr"], b["statics"])

            d_real = self.discriminator(b["target"] * maskf, b["lr"])
            d_fake = self.discriminator(fake.detach() * maskf, b["lr"])
            _, d_loss = cgan_losses(d_real, d_fake, fake, b["target"], b["mask"], lam)
            if not _finite(d_loss):
                raise DivergenceError(f"diverged at epoch {epoch} batch {b_idx} (discriminator)")
            self.opt_d.zero_grad()
            d_loss.backward()
            self.opt_d.step()

            d_fake = self.discriminator(fake * maskf, b["lr"])
            g_loss, _ = cgan_losses(d_real.detach(), d_fake, fake, b["target"], b["mask"], lam)
            if not _finite(g_loss):
                raise DivergenceError(f"diverged at epoch {epoch} batch {b_idx} (generator)")
            self.opt_g.zero_grad()
            g_loss.backward()
            self.opt_g.step()

            self.report.d_steps.append(d_loss.item())
            self.report.g_steps.append(g_loss.item())
            g_total += g_loss.item() * len(idx)
            d_total += d_loss.item() * len(idx)
        n = len(samples)
        return {"train_loss": g_total / n, "g_loss": g_total / n, "d_loss": d_total / n}

    def save(self, path) -> Path:
        return save_checkpoint(
            self.model,
            path,
            discriminator=self.discriminator,
            optimizers={"generator": (self.opt_g, self.model), "discriminator": (self.opt_d, self.discriminator)},
            meta=self._meta(),
        )

    def resume(self, path) -> "CGANTrainer":
        ckpt = read_checkpoint(path)
        if ckpt.spec != self.model.spec:
            raise CheckpointError("spec mismatch: checkpoint and model architectures differ")
        self.model.load_state_dict(ckpt.group("model"))
        self.discriminator.load_state_dict(ckpt.group("discriminator"))
        restore_optimizer(self.opt_g, self.model, ckpt.group("optim_generator"))
        restore_optimizer(self.opt_d, self.discriminator, ckpt.group("optim_discriminator"))
        self._restore_meta(ckpt.meta)
        return self


def supervised_train(model, samples, cfg: TrainConfig, val_samples=None, resume_from=None) -> TrainReport:
    trainer = SupervisedTrainer(model, cfg)
    if resume_from is not None:
        trainer.resume(resume_from)
    return trainer.fit(samples, val_samples)


def cgan_train(generator, discriminator, samples, cfg: TrainConfig, val_samples=None, resume_from=None) -> TrainReport:
    trainer = CGANTrainer(generator, discriminator, cfg)
    if resume_from is not None:
        trainer.resume(resume_from)
    return trainer.fit(samples, val_samples)


def mean_discriminator_scores(generator, discriminator, samples, batch_size: int = 16) -> tuple[float, float]:
    """Mean D score on real targets and on generated fields over ``samples``."""
    dtype = next(generator.parameters()).dtype
    set_mode(generator, "infer")
    set_mode(discriminator, "infer")
    real, fake = [], []
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            b = collate(samples[start : start + batch_size], dtype)
            maskf = b["mask"].to(dtype)
            g = generator(b["lr"], b["statics"])
            real.append(discriminator(b["target"] * maskf, b["lr"]))
            fake.append(discriminator(g * maskf, b["lr"]))
    return float(torch.cat(real).mean()), float(torch.cat(fake).mean())
