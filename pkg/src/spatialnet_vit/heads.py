"""Task heads and the multi-task objective.

Each task owns a fully connected head on the mean-pooled encoder output:
softmax for classification tasks, linear for regression tasks. Per-task
losses are combined as a weighted sum, and the final objective adds an L2
penalty over every learned scalar (biases included).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor, add, as_tensor, log, matmul, mean, mul, reshape, softmax_rows, square, sub, tsum

LOG_EPS = 1e-12
KINDS = ("classification", "regression")


@dataclass(frozen=True)
class TaskSpec:
    id: str
    kind: str
    classes: int | None = None
    weight: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"task {self.id!r}: kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind == "classification":
            if self.classes is None or self.classes < 2:
                raise ConfigError(f"task {self.id!r}: classification needs classes >= 2")
        elif self.classes not in (None, 1):
            raise ConfigError(f"task {self.id!r}: regression tasks have a single output")
        if not self.weight > 0:
            raise ConfigError(f"task {self.id!r}: loss weight must be > 0, got {self.weight}")

    @property
    def outputs(self) -> int:
        return self.classes if self.kind == "classification" else 1

    def to_dict(self) -> dict:
        d = {"id": self.id, "kind": self.kind, "lambda": self.weight}
        if self.kind == "classification":
            d["classes"] = self.classes
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> TaskSpec:
        try:
            return cls(id=str(d["id"]), kind=d["kind"], classes=d.get("classes"),
                       weight=float(d.get("lambda", 1.0)))
        except KeyError as exc:
            raise ConfigError(f"task entry missing field {exc}") from exc


class TaskSet(Sequence[TaskSpec]):
    """Ordered, id-unique collection of tasks."""

    def __init__(self, tasks: Iterable[TaskSpec]):
        self._tasks = tuple(tasks)
        if not self._tasks:
            raise ConfigError("a task set needs at least one task")
        ids = [t.id for t in self._tasks]
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            raise ConfigError(f"duplicate task ids: {dupes}")
        self._by_id = {t.id: t for t in self._tasks}

    def __getitem__(self, i):
        return self._tasks[i]

    def __len__(self):
        return len(self._tasks)

    def __iter__(self) -> Iterator[TaskSpec]:
        return iter(self._tasks)

    def __contains__(self, task_id) -> bool:
        return task_id in self._by_id

    def __eq__(self, other):
        return isinstance(other, TaskSet) and self._tasks == other._tasks

    def __repr__(self):
        return f"TaskSet({list(self._tasks)!r})"

    def get(self, task_id: str) -> TaskSpec:
        return self._by_id[task_id]

    @property
    def ids(self) -> list[str]:
        return [t.id for t in self._tasks]

    def to_list(self) -> list[dict]:
        return [t.to_dict() for t in self._tasks]

    @classmethod
    def from_list(cls, items: Iterable[Mapping]) -> TaskSet:
        return cls(TaskSpec.from_dict(d) for d in items)


@dataclass(frozen=True)
class RegularizationConfig:
    weight: float = 0.01

    def __post_init__(self):
        if self.weight < 0:
            raise ConfigError(f"regularization weight must be >= 0, got {self.weight}")


@dataclass
class TaskHead:
    task: TaskSpec
    weight: Tensor   # D x outputs
    bias: Tensor     # outputs
    pooling: str = "mean"


def head_forward(z, head: TaskHead) -> Tensor:
    """Pool ``z`` over patches, project, then apply the task's activation.

    ``z`` is ``N x D`` or ``B x N x D``. Classification returns class
    probabilities (``C`` or ``B x C``); regression returns the raw value
    (scalar or ``B``).
    """
    z = as_tensor(z)
    if z.ndim not in (2, 3) or z.shape[-1] != head.weight.shape[0]:
        raise ShapeError(f"encoded shape {z.shape} does not match head weight {head.weight.shape}")
    single = z.ndim == 2
    pooled = mean(z, axis=-2)
    if single:
        pooled = reshape(pooled, (1, pooled.shape[0]))
    out = add(matmul(pooled, head.weight), head.bias)
    if head.task.kind == "classification":
        out = softmax_rows(out)
        return reshape(out, (out.shape[-1],)) if single else out
    return reshape(out, ()) if single else reshape(out, (out.shape[0],))


def _check_one_hot(y: np.ndarray) -> None:
    ok = np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=-1) == 1)
    if not ok:
        raise ContractError("target is not a one-hot vector")


def one_hot(labels, classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros(labels.shape + (classes,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def cross_entropy(probs, target) -> Tensor:
    """-sum_c y_c log(min(p_c + 1e-12, 1)), averaged over rows when batched.

    Capping the argument at 1 keeps the loss nonnegative when p_c = 1.
    """
    probs = as_tensor(probs)
    y = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=probs.dtype)
    if y.shape != probs.shape:
        raise ShapeError(f"cross_entropy: prediction {probs.shape} vs target {y.shape}")
    _check_one_hot(y)
    per_row = -tsum(mul(log(probs, LOG_EPS, cap=1.0), Tensor(y, dtype=probs.dtype)), axis=-1)
    return per_row if per_row.ndim == 0 else mean(per_row)


def mse(pred, target) -> Tensor:
    """Mean of squared differences over equal-length vectors."""
    pred = as_tensor(pred)
    y = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if pred.shape != y.shape:
        raise ShapeError(f"mse: prediction {pred.shape} vs target {y.shape}")
    if pred.size == 0:
        raise ContractError("mse needs at least one value")
    return mean(square(sub(pred, Tensor(y, dtype=pred.dtype))))


def mtl_loss(losses: Mapping[str, Tensor | float], tasks: TaskSet):
    """Weighted sum of per-task losses in task order."""
    missing = [t.id for t in tasks if t.id not in losses]
    if missing:
        raise ContractError(f"no loss given for tasks {missing}")
    total = 0.0
    for t in tasks:
        total = total + t.weight * losses[t.id]
    return total


def l2_reg(params: Iterable[Tensor] | Mapping[str, Tensor]) -> Tensor:
    """Half the sum of squares over every scalar in ``params``."""
    if isinstance(params, Mapping):
        params = params.values()
    total = Tensor(0.0)
    for p in params:
        total = total + tsum(square(p))
    return total * 0.5


@dataclass(frozen=True)
class LossReport:
    task_losses: dict[str, Tensor]
    mtl: Tensor
    reg: Tensor
    final: Tensor
    reg_weight: float = 0.0
    labeled: dict[str, int] = field(default_factory=dict)

    def as_floats(self) -> dict[str, float]:
        out = {f"task/{k}": v.item() for k, v in self.task_losses.items()}
        out.update(mtl=self.mtl.item(), reg=self.reg.item(), final=self.final.item())
        return out


def task_loss(pred: Tensor, values, task: TaskSpec) -> tuple[Tensor, int]:
    """Batch-mean loss of one task over the samples that carry a label.

    Missing labels are NaN in ``values``; they contribute nothing to the loss
    or to its denominator. Returns the loss and the number of labeled rows.
    """
    values = np.asarray(values, dtype=float)
    if values.shape != (pred.shape[0],):
        raise ShapeError(f"task {task.id!r}: {values.shape} targets for {pred.shape[0]} predictions")
    keep = np.flatnonzero(~np.isnan(values))
    if keep.size == 0:
        return Tensor(0.0, dtype=pred.dtype), 0
    if task.kind == "classification":
        labels = values[keep]
        if np.any(labels != np.round(labels)) or np.any(labels < 0) or np.any(labels >= task.classes):
            raise ContractError(f"task {task.id!r}: class labels must be integers in [0, {task.classes})")
        rows = pred if keep.size == pred.shape[0] else pred[keep]
        return cross_entropy(rows, one_hot(labels.astype(int), task.classes)), keep.size
    rows = pred if keep.size == pred.shape[0] else pred[keep]
    return mse(rows, values[keep]), keep.size


def final_loss(predictions: Mapping[str, Tensor], targets: Mapping[str, Sequence[float]],
               tasks: TaskSet, reg: RegularizationConfig | float,
               params: Iterable[Tensor] | Mapping[str, Tensor]) -> LossReport:
    """Compose per-task losses, their weighted sum, and the L2 penalty.

    ``predictions[t]`` is the batched head output for task ``t``;
    ``targets[t]`` holds one class index or real value per sample (NaN when
    the sample has no label for that task).
    """
    if isinstance(reg, RegularizationConfig):
        reg = reg.weight
    batch = {predictions[t.id].shape[0] if predictions[t.id].ndim else 0 for t in tasks}
    if not batch or 0 in batch:
        raise ContractError("final_loss needs a non-empty batch")
    if len(batch) != 1:
        raise ShapeError(f"tasks disagree on batch size: {sorted(batch)}")
    losses, labeled = {}, {}
    for t in tasks:
        if t.id not in targets:
            values = np.full(next(iter(batch)), np.nan)
        else:
            values = targets[t.id]
        losses[t.id], labeled[t.id] = task_loss(predictions[t.id], values, t)
    combined = mtl_loss(losses, tasks)
    penalty = l2_reg(params)
    total = combined + penalty * reg
    return LossReport(task_losses=losses, mtl=combined, reg=penalty, final=total,
                      reg_weight=reg, labeled=labeled)

