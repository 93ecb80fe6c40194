"""Minibatch training loops for pretraining and fine-tuning."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import AdamW, NonFiniteError, OneCycleSchedule, Tensor, backward, no_grad
from .checkpoint import quantize
from .models import ModelBundle
from .objectives import LossBreakdown, lssl_loss, lssl_node_loss
from .odesolve import SolverConfig, SolverError
from .synthdata import PairDataset

__all__ = ["PretrainConfig", "EpochRecord", "TrainingDiverged", "Pretrainer", "fit", "batch_indices"]

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Loss or gradients became non-finite."""


@dataclass
class PretrainConfig:
    epochs: int = 60
    lr: float = 5e-4
    weight_decay: float = 1e-5
    batch_size: int = 64
    seed: int = 0
    solver: SolverConfig = field(default_factory=SolverConfig)
    grad_mode: str = "adjoint"


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_total: float
    train_recon: float
    train_direction: float
    val_total: float
    val_recon: float
    val_direction: float
    accepted_steps: int = 0
    rejected_steps: int = 0
    fevals: int = 0

    def row(self) -> dict:
        return asdict(self)


def batch_indices(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[k : k + batch_size] for k in range(0, n, batch_size)]


def _epoch_rng(seed: int, epoch: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), 7, stream, epoch]))


def _snap(params: Sequence[Tensor], opt: AdamW) -> None:
    # keep in-memory state equal to what a checkpoint stores, so resuming is exact
    for p, m, v in zip(params, opt.state.m, opt.state.v):
        p.data[...] = quantize(p.data)
        m[...] = quantize(m)
        v[...] = quantize(v)


class Pretrainer:
    """Owns a bundle, its optimizer and schedule; runs whole epochs."""

    def __init__(self, bundle: ModelBundle, pairs: PairDataset, cfg: PretrainConfig):
        self.bundle = bundle
        self.cfg = cfg
        self.train = pairs.split("train").arrays()
        val = pairs.split("val")
        self.val = val.arrays() if len(val) else None
        self.params = bundle.parameters()
        self.opt = AdamW(self.params, lr=cfg.lr, weight_decay=cfg.weight_decay)
        n = len(self.train["x_i"])
        self.steps_per_epoch = -(-n // cfg.batch_size)
        self.schedule = OneCycleSchedule(cfg.lr, max(1, cfg.epochs * self.steps_per_epoch))
        self.epoch = 0
        self.history: list[EpochRecord] = []

    def loss(self, data: dict, idx, stats: dict | None = None) -> LossBreakdown:
        x_i = Tensor(data["x_i"][idx])
        x_j = Tensor(data["x_j"][idx])
        if self.bundle.node:
            return lssl_node_loss(self.bundle, x_i, data["t_i"][idx], x_j, data["t_j"][idx],
                                  cfg=self.cfg.solver, grad_mode=self.cfg.grad_mode, stats=stats)
        return lssl_loss(self.bundle, x_i, x_j)

    def validate(self) -> LossBreakdown | None:
        if self.val is None:
            return None
        with no_grad():
            return self.loss(self.val, slice(None))

    def run_epoch(self) -> EpochRecord:
        cfg = self.cfg
        rng = _epoch_rng(cfg.seed, self.epoch)
        stats: dict = {}
        sums = np.zeros(3)
        count = 0
        lr = cfg.lr
        for idx in batch_indices(len(self.train["x_i"]), cfg.batch_size, rng):
            lr = self.schedule.lr(self.opt.state.step)
            self.opt.zero_grad()
            try:
                br = self.loss(self.train, idx, stats)
                backward(br.total)
            except (NonFiniteError, SolverError) as exc:
                raise TrainingDiverged(f"epoch {self.epoch}: {exc}") from exc
            grads = [p.grad for p in self.params if p.grad is not None]
            if not all(np.isfinite(g).all() for g in grads):
                raise TrainingDiverged(f"epoch {self.epoch}: non-finite gradient")
            self.opt.step(lr)
            k = len(idx)
            sums += k * np.array([br.total.item(), br.recon, br.direction])
            count += k
        _snap(self.params, self.opt)
        val = self.validate()
        tr = sums / max(count, 1)
        rec = EpochRecord(
            epoch=self.epoch,
            lr=lr,
            train_total=float(tr[0]),
            train_recon=float(tr[1]),
            train_direction=float(tr[2]),
            val_total=val.total.item() if val else float("nan"),
            val_recon=val.recon if val else float("nan"),
            val_direction=val.direction if val else float("nan"),
            accepted_steps=stats.get("accepted", 0),
            rejected_steps=stats.get("rejected", 0),
            fevals=stats.get("fevals", 0),
        )
        self.history.append(rec)
        self.epoch += 1
        log.debug("%s epoch %d: %s", self.bundle.mode, rec.epoch, rec)
        return rec

    # -- checkpoint state

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        names = [n for n, _ in self.bundle.named_parameters()]
        for name, p in zip(names, self.params):
            out["model." + name] = p.data
        for name, m, v in zip(names, self.opt.state.m, self.opt.state.v):
            out["opt.m." + name] = m
            out["opt.v." + name] = v
        return out

    def state_header(self) -> dict:
        return {"epoch": self.epoch, "opt_step": self.opt.state.step}

    def load_state(self, tensors: dict[str, np.ndarray], header: dict) -> None:
        names = [n for n, _ in self.bundle.named_parameters()]
        for name, p in zip(names, self.params):
            p.data[...] = tensors["model." + name]
        if "opt.m." + names[0] in tensors:
            for name, m, v in zip(names, self.opt.state.m, self.opt.state.v):
                m[...] = tensors["opt.m." + name]
                v[...] = tensors["opt.v." + name]
        self.opt.state.step = int(header.get("opt_step", 0))
        self.epoch = int(header.get("epoch", 0))


def fit(params: Sequence[Tensor], loss_fn: Callable[[np.ndarray], Tensor], n_samples: int, epochs: int,
        lr: float, weight_decay: float, batch_size: int, seed: int, stream: int = 1) -> list[float]:
    """Generic AdamW + one-cycle loop; ``loss_fn(indices)`` builds a minibatch loss."""
    params = list(params)
    opt = AdamW(params, lr=lr, weight_decay=weight_decay)
    steps = epochs * -(-n_samples // batch_size)
    sched = OneCycleSchedule(lr, max(1, steps))
    losses = []
    for epoch in range(epochs):
        rng = _epoch_rng(seed, epoch, stream)
        total, count = 0.0, 0
        for idx in batch_indices(n_samples, batch_size, rng):
            opt.zero_grad()
            try:
                loss = loss_fn(idx)
                backward(loss)
            except (NonFiniteError, SolverError) as exc:
                raise TrainingDiverged(f"fine-tune epoch {epoch}: {exc}") from exc
            opt.step(sched.lr(opt.state.step))
            total += loss.item() * len(idx)
            count += len(idx)
        losses.append(total / max(count, 1))
    return losses
