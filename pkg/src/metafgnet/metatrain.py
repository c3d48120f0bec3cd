"""Inner adaptation, meta-gradient, and the three training methods.

Gradients are assembled into one vector over the full ``[target head | base |
source head]`` buffer: target-side gradients (over theta_t) fill the front,
source-side gradients (over theta_s) fill the back, and the base segment in
the middle receives both.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamVector
from .data import Batch, LabeledDataset, sample_batch
from .model import TwoHeadParams, evaluate, loss_source_fn, loss_target_fn

METHODS = ("metafgnet", "joint", "finetune", "pretrain")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.1  # outer step size (alpha)
    meta_lr: float = 0.01  # inner step size (eta)
    lr_steps: tuple[int, ...] = ()  # epochs at which both step sizes are divided by 10
    batch_target: int = 32
    batch_aux: int = 32
    epochs: int = 10
    momentum: float = 0.9
    weight_decay: float = 1e-4
    reg_weight: float = 1.0
    seed: int = 0
    hvp_backend: str = "exact"
    iters_per_epoch: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "lr_steps", tuple(int(e) for e in self.lr_steps))
        if self.meta_lr < 0 or self.lr <= 0:
            raise ValueError("need meta_lr >= 0 and lr > 0")
        if self.batch_target < 1 or self.batch_aux < 1:
            raise ValueError("batch sizes must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")

    def step_sizes(self, epoch: int) -> tuple[float, float]:
        """(lr, meta_lr) in effect during ``epoch`` (0-based)."""
        k = sum(1 for e in self.lr_steps if epoch >= e)
        return self.lr * 0.1**k, self.meta_lr * 0.1**k


class SGD:
    """Momentum SGD with coupled weight decay and one buffer per parameter."""

    def __init__(self, momentum: float = 0.9, weight_decay: float = 1e-4):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffer: np.ndarray | None = None

    def step(self, flat: np.ndarray, grad: np.ndarray, lr: float, mask: np.ndarray | None = None) -> np.ndarray:
        d = grad + self.weight_decay * flat if self.weight_decay else grad.copy()
        if mask is not None:
            d = d * mask
        if self.momentum:
            if self.buffer is None:
                self.buffer = d
            else:
                self.buffer = self.momentum * self.buffer + d
            d = self.buffer
        return flat - lr * d


# -- single steps ---------------------------------------------------------------


def inner_step(params: TwoHeadParams, batch: Batch, eta: float) -> ParamVector:
    """Adapted theta_t after one plain gradient step on the target loss."""
    if eta < 0:
        raise ValueError("eta must be non-negative")
    theta = params.theta_t
    g = ad.grad(loss_target_fn(params.config), theta, batch)
    return ParamVector(theta.values - eta * g.values, theta.layout)


def _meta_value_and_grad(
    params: TwoHeadParams, t_i: Batch, t_j: Batch, eta: float, backend: str = "exact"
) -> tuple[float, ParamVector]:
    f = loss_target_fn(params.config)
    theta = params.theta_t.copy()
    adapted = inner_step(params, t_i, eta)
    outer_loss, g_adapted = ad.value_and_grad(f, adapted, t_j)
    if eta == 0:
        return outer_loss, g_adapted
    h_g = ad.hvp(f, theta, t_i, g_adapted, backend=backend)
    return outer_loss, ParamVector(g_adapted.values - eta * h_g.values, theta.layout)


def meta_gradient(params: TwoHeadParams, t_i: Batch, t_j: Batch, eta: float, backend: str = "exact") -> ParamVector:
    """Gradient wrt theta_t of the post-adaptation target loss on ``t_j``.

    Equals g' - eta * H g', where g' is the ``t_j`` gradient at the adapted
    parameters and H the Hessian of the ``t_i`` loss at the current ones.
    """
    if len(t_i) == 0 or len(t_j) == 0:
        raise ValueError("meta-gradient needs non-empty batches")
    return _meta_value_and_grad(params, t_i, t_j, eta, backend)[1]


def meta_objective(params: TwoHeadParams, t_i: Batch, t_j: Batch, eta: float) -> float:
    """Post-adaptation target loss on ``t_j`` (the quantity meta_gradient differentiates)."""
    adapted = inner_step(params, t_i, eta)
    return ad.value(loss_target_fn(params.config), adapted, t_j)


class StepResult(NamedTuple):
    params: TwoHeadParams
    target_loss: float
    reg_loss: float


def _full_grad(params: TwoHeadParams, g_target: ParamVector | None, g_source: ParamVector | None) -> np.ndarray:
    out = np.zeros_like(params.flat)
    if g_target is not None:
        out[: g_target.values.size] += g_target.values
    if g_source is not None:
        out[params.n_target_head :] += g_source.values
    return out


def _regularizer(params: TwoHeadParams, s_i: Batch, weight: float) -> tuple[float, ParamVector | None]:
    loss, g = ad.value_and_grad(loss_source_fn(params.config), params.theta_s, s_i)
    if weight == 1.0:
        return loss, g
    return loss, g * weight


def _apply(params, grad, optimizer, config, lr, mask=None) -> TwoHeadParams:
    if optimizer is None:
        optimizer = SGD(config.momentum, config.weight_decay)
    lr = config.lr if lr is None else lr
    return TwoHeadParams(params.config, optimizer.step(params.flat, grad, lr, mask))


def meta_train_step(
    params: TwoHeadParams,
    t_i: Batch,
    t_j: Batch,
    s_i: Batch,
    config: TrainConfig,
    optimizer: SGD | None = None,
    lr: float | None = None,
    meta_lr: float | None = None,
) -> StepResult:
    """One iteration of the regularized meta-learning update.

    Both gradient contributions are evaluated at the same snapshot and
    applied together.
    """
    eta = config.meta_lr if meta_lr is None else meta_lr
    reg_loss, g_s = _regularizer(params, s_i, config.reg_weight)
    meta_loss, g_m = _meta_value_and_grad(params, t_i, t_j, eta, config.hvp_backend)
    new = _apply(params, _full_grad(params, g_m, g_s), optimizer, config, lr)
    return StepResult(new, meta_loss, reg_loss)


def joint_train_step(
    params: TwoHeadParams,
    t_i: Batch,
    s_i: Batch,
    config: TrainConfig,
    optimizer: SGD | None = None,
    lr: float | None = None,
) -> StepResult:
    """One SGD step on target loss plus weighted auxiliary loss."""
    reg_loss, g_s = _regularizer(params, s_i, config.reg_weight)
    t_loss, g_t = ad.value_and_grad(loss_target_fn(params.config), params.theta_t, t_i)
    new = _apply(params, _full_grad(params, g_t, g_s), optimizer, config, lr)
    return StepResult(new, t_loss, reg_loss)


def _theta_t_mask(params: TwoHeadParams) -> np.ndarray:
    mask = np.zeros_like(params.flat)
    mask[: params.n_target_head + params.n_base] = 1.0
    return mask


def _theta_s_mask(params: TwoHeadParams) -> np.ndarray:
    mask = np.zeros_like(params.flat)
    mask[params.n_target_head :] = 1.0
    return mask


def finetune_step(params, t_i, config, optimizer=None, lr=None) -> StepResult:
    """SGD on the target loss alone; the source head is frozen."""
    t_loss, g_t = ad.value_and_grad(loss_target_fn(params.config), params.theta_t, t_i)
    new = _apply(params, _full_grad(params, g_t, None), optimizer, config, lr, _theta_t_mask(params))
    return StepResult(new, t_loss, 0.0)


def pretrain_step(params, s_i, config, optimizer=None, lr=None) -> StepResult:
    """SGD on the auxiliary loss alone; the target head is frozen."""
    s_loss, g_s = ad.value_and_grad(loss_source_fn(params.config), params.theta_s, s_i)
    new = _apply(params, _full_grad(params, None, g_s), optimizer, config, lr, _theta_s_mask(params))
    return StepResult(new, 0.0, s_loss)


# -- reports --------------------------------------------------------------------


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    epoch: int
    meta_loss: float
    reg_loss: float
    lr: float
    meta_lr: float


CSV_COLUMNS = [f.name for f in fields(IterationRecord)]


@dataclass
class TrainReport:
    method: str
    records: list[IterationRecord] = field(default_factory=list)
    epoch_accuracy: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)  # wall clock per iteration; not serialized

    def losses(self) -> np.ndarray:
        return np.array([r.meta_loss for r in self.records])

    def final_loss(self) -> float:
        """Mean per-iteration loss over the last recorded epoch."""
        if not self.records:
            return math.nan
        last = self.records[-1].epoch
        return float(np.mean([r.meta_loss for r in self.records if r.epoch == last]))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for r in self.records:
                w.writerow([r.iteration, r.epoch, repr(r.meta_loss), repr(r.reg_loss), repr(r.lr), repr(r.meta_lr)])

    @classmethod
    def from_csv(cls, path: str | Path, method: str = "") -> TrainReport:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected header {rows[:1]}")
        recs = [
            IterationRecord(int(r[0]), int(r[1]), float(r[2]), float(r[3]), float(r[4]), float(r[5]))
            for r in rows[1:]
        ]
        return cls(method, recs)


# -- loop -------------------------------------------------------------------------


def _iters_per_epoch(method: str, target: LabeledDataset, aux: LabeledDataset | None, cfg: TrainConfig) -> int:
    if cfg.iters_per_epoch is not None:
        return cfg.iters_per_epoch
    if method == "finetune":
        return math.ceil(len(target) / min(cfg.batch_target, len(target)))
    return math.ceil(len(aux) / min(cfg.batch_aux, len(aux)))


def train_loop(
    method: str,
    params: TwoHeadParams,
    target: LabeledDataset | None,
    aux: LabeledDataset | None,
    config: TrainConfig,
    eval_set: LabeledDataset | None = None,
) -> tuple[TwoHeadParams, TrainReport]:
    """Run ``config.epochs`` epochs of ``method`` and record every iteration.

    ``method`` is one of metafgnet, joint, finetune (alias finetune-only) or
    pretrain (auxiliary loss only, the warm-up phase).
    """
    if method == "finetune-only":
        method = "finetune"
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if method != "pretrain" and (target is None or len(target) == 0):
        raise ValueError(f"{method} needs a non-empty target set")
    if method != "finetune" and (aux is None or len(aux) == 0):
        raise ValueError(f"{method} needs a non-empty auxiliary set")

    rng = np.random.default_rng(config.seed)
    opt = SGD(config.momentum, config.weight_decay)
    report = TrainReport(method)
    bt = min(config.batch_target, len(target)) if target is not None else 0
    bs = min(config.batch_aux, len(aux)) if aux is not None else 0
    per_epoch = _iters_per_epoch(method, target, aux, config)
    it = 0
    for epoch in range(config.epochs):
        lr, eta = config.step_sizes(epoch)
        for _ in range(per_epoch):
            t0 = time.perf_counter()
            if method == "metafgnet":
                t_i = sample_batch(target, bt, rng)
                s_i = sample_batch(aux, bs, rng)
                t_j = sample_batch(target, bt, rng)
                res = meta_train_step(params, t_i, t_j, s_i, config, opt, lr, eta)
            elif method == "joint":
                t_i = sample_batch(target, bt, rng)
                s_i = sample_batch(aux, bs, rng)
                res = joint_train_step(params, t_i, s_i, config, opt, lr)
            elif method == "finetune":
                res = finetune_step(params, sample_batch(target, bt, rng), config, opt, lr)
            else:
                res = pretrain_step(params, sample_batch(aux, bs, rng), config, opt, lr)
            params = res.params
            report.records.append(IterationRecord(it, epoch, res.target_loss, res.reg_loss, lr, eta))
            report.seconds.append(time.perf_counter() - t0)
            it += 1
        if eval_set is not None:
            report.epoch_accuracy.append(evaluate(params, eval_set))
    return params, report


def smoothed(values: Sequence[float], window: int = 20) -> np.ndarray:
    """Means over consecutive non-overlapping windows (a trailing partial window is dropped)."""
    v = np.asarray(values, dtype=np.float64)
    n = len(v) // window
    return v[: n * window].reshape(n, window).mean(axis=1)
