"""Mini-batch training against the regularised multi-task objective."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .encoder import PRESETS
from .errors import ConfigError, ConfigMismatchError, ContractError, DivergedError
from .heads import RegularizationConfig, final_loss
from .model import SpatialNetViT, round_count
from .optim import AdamState, adam_step, sgd_step
from .tensor import backward

log = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "sgd")


class LCG64:
    """64-bit linear congruential generator used for epoch shuffles.

    state <- (6364136223846793005 * state + 1442695040888963407) mod 2**64.
    The seed is taken modulo 2**64 as the initial state. Shuffles are
    Fisher-Yates from the last index down, drawing j = (x >> 11) * (i + 1) >> 53
    from each fresh output x.
    """

    MULTIPLIER = 6364136223846793005
    INCREMENT = 1442695040888963407
    MASK = (1 << 64) - 1

    def __init__(self, seed: int):
        self.state = seed & self.MASK

    def next(self) -> int:
        self.state = (self.MULTIPLIER * self.state + self.INCREMENT) & self.MASK
        return self.state

    def below(self, bound: int) -> int:
        return ((self.next() >> 11) * bound) >> 53

    def permutation(self, n: int) -> np.ndarray:
        order = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            order[i], order[j] = order[j], order[i]
        return np.array(order, dtype=int)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 50
    optimizer: str = "adam"
    seed: int = 0
    preset: str | None = "paper"
    reg_weight: float = 0.01
    frozen: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.lr}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch size and epochs must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.preset is not None and self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        RegularizationConfig(self.reg_weight)


@dataclass
class EpochRecord:
    epoch: int
    losses: dict[str, float]
    metrics: dict[str, float]
    seconds: float

    def to_dict(self, timing: bool = True) -> dict:
        d = {"epoch": self.epoch, "losses": self.losses, "metrics": self.metrics}
        if timing:
            d["seconds"] = self.seconds
        return d


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    steps: int = 0
    optimizer_state: AdamState | None = None

    def loss_sequence(self) -> list[float]:
        return [e.losses["final"] for e in self.epochs]

    def to_dict(self, timing: bool = True) -> dict:
        return {
            "steps": self.steps,
            "step_losses": self.step_losses,
            "epochs": [e.to_dict(timing) for e in self.epochs],
        }


# the full-size preset also fixes the loss weights
PAPER_TASK_WEIGHT = 1.0
PAPER_REG_WEIGHT = 0.01


def check_preset(model: SpatialNetViT, preset: str | None, reg_weight: float | None = None) -> None:
    if preset is None:
        return
    cfg = model.config
    wanted = PRESETS[preset]
    actual = {k: getattr(cfg, k) for k in wanted}
    if actual != wanted:
        raise ConfigMismatchError(f"model sizes {actual} do not match preset {preset!r} {wanted}")
    if preset == "paper":
        off = [t.id for t in model.tasks if t.weight != PAPER_TASK_WEIGHT]
        if off:
            raise ConfigMismatchError(f"preset 'paper' needs lambda_t = 1.0; tasks {off} differ")
        if reg_weight is not None and reg_weight != PAPER_REG_WEIGHT:
            raise ConfigMismatchError(f"preset 'paper' needs lambda_reg = 0.01, got {reg_weight}")


def evaluate(model: SpatialNetViT, dataset: Dataset, batch_size: int = 128) -> dict[str, float]:
    """Accuracy per classification task; MAE and exact-count accuracy per
    regression task (predictions rounded to nonnegative integers)."""
    preds: dict[str, list] = {t.id: [] for t in model.tasks}
    for start in range(0, len(dataset), batch_size):
        out = model.predict(dataset.images[start:start + batch_size])
        for tid, values in out.items():
            preds[tid].append(values)
    metrics = {}
    for task in model.tasks:
        truth = dataset.targets[task.id]
        have = ~np.isnan(truth)
        if not have.any():
            continue
        guess = np.concatenate(preds[task.id])[have]
        truth = truth[have]
        if task.kind == "classification":
            metrics[f"{task.id}/accuracy"] = float(np.mean(guess == truth))
        else:
            metrics[f"{task.id}/mae"] = float(np.mean(np.abs(guess - truth)))
            metrics[f"{task.id}/accuracy"] = float(np.mean(guess == round_count(truth)))
    return metrics


def _batch_targets(dataset: Dataset, idx: np.ndarray) -> dict[str, np.ndarray]:
    return {k: v[idx] for k, v in dataset.targets.items()}


def train(model: SpatialNetViT, dataset: Dataset, config: TrainConfig,
          eval_set: Dataset | None = None, optimizer_state: AdamState | None = None) -> TrainLog:
    """Run ``config.epochs`` epochs of shuffled mini-batch updates.

    Parameters whose names start with any prefix in ``config.frozen`` are
    left untouched. Metrics are computed on ``eval_set`` after every epoch
    (on ``dataset`` when no evaluation set is given).
    """
    if len(dataset) == 0:
        raise ContractError("cannot train on an empty dataset")
    missing = [t.id for t in model.tasks if t.id not in dataset.targets]
    if missing:
        raise ContractError(f"dataset has no targets for tasks {missing}")
    check_preset(model, config.preset, config.reg_weight)

    trainable = {n: p for n, p in model.named_parameters()
                 if not any(n.startswith(prefix) for prefix in config.frozen)}
    params = model.params
    rng = LCG64(config.seed)
    state = optimizer_state or AdamState()
    result = TrainLog()
    step = 0
    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        order = rng.permutation(len(dataset))
        sums: dict[str, float] = {}
        batches = 0
        for start in range(0, len(dataset), config.batch_size):
            idx = order[start:start + config.batch_size]
            preds = model.forward(dataset.images[idx])
            report = final_loss(preds, _batch_targets(dataset, idx), model.tasks,
                                config.reg_weight, params)
            value = report.final.item()
            if not math.isfinite(value):
                raise DivergedError(step, f"loss is {value}")
            grads = backward(report.final, trainable)
            if config.optimizer == "adam":
                state = adam_step(trainable, grads, state, config.lr, step)
            else:
                sgd_step(trainable, grads, config.lr, step)
            for key, v in report.as_floats().items():
                sums[key] = sums.get(key, 0.0) + v
            result.step_losses.append(value)
            batches += 1
            step += 1
        losses = {k: v / batches for k, v in sums.items()}
        metrics = evaluate(model, eval_set if eval_set is not None else dataset)
        record = EpochRecord(epoch, losses, metrics, time.perf_counter() - started)
        result.epochs.append(record)
        log.info("epoch %d loss %.6f %s", epoch, losses["final"],
                 " ".join(f"{k}={v:.4f}" for k, v in metrics.items()))
    result.steps = step
    result.optimizer_state = state if config.optimizer == "adam" else None
    return result
