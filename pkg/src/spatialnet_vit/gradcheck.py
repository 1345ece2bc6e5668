"""Central finite-difference checks of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import ContractError, DeterminismError
from .tensor import ComputationRecord, Tensor, backward


@dataclass(frozen=True)
class GradCheckReport:
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)
    checked: int = 0
    # scalars whose step was shrunk because +-eps crossed a ReLU kink
    kink_retries: int = 0

    @property
    def passed(self) -> bool:
        return all(err <= self.tolerance for err in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "tolerance": self.tolerance,
            "max_error": self.max_error,
            "checked": self.checked,
            "kink_retries": self.kink_retries,
            "errors": dict(self.errors),
        }


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def sample_indices(size: int, samples: int, rng: np.random.Generator) -> np.ndarray:
    """Stride-based subsample of ``samples`` flat indices with a seeded offset."""
    if size <= samples:
        return np.arange(size)
    stride = size // samples
    offset = int(rng.integers(stride))
    return offset + stride * np.arange(samples)


def relu_pattern(loss: Tensor) -> bytes:
    """Packed activation masks of every ReLU node feeding ``loss``."""
    masks = [np.packbits(n.data > 0) for n in ComputationRecord.from_output(loss) if n.op == "relu"]
    return b"".join(m.tobytes() for m in masks)


def _central(loss_fn, param, flat_index, eps):
    original = param.data
    try:
        bumped = original.copy()
        bumped.flat[flat_index] = original.flat[flat_index] + eps
        param.assign(bumped)
        up = loss_fn()
        bumped.flat[flat_index] = original.flat[flat_index] - eps
        param.assign(bumped)
        down = loss_fn()
    finally:
        param.assign(original)
    return up, down


def numeric_gradient(loss_fn: Callable[[], Tensor], param: Tensor, flat_index: int,
                     eps: float) -> float:
    up, down = _central(loss_fn, param, flat_index, eps)
    return (up.item() - down.item()) / (2.0 * eps)


def gradcheck(params: Mapping[str, Tensor], loss_fn: Callable[[], Tensor],
              eps: float = 1e-3, tol: float = 1e-3, samples: int = 16,
              seed: int = 0, kink_aware: bool = True,
              min_eps: float = 1e-7) -> GradCheckReport:
    """Compare :func:`backward` against central differences.

    Every tensor in ``params`` is probed at ``samples`` scalars (all of them
    when it is smaller). ``loss_fn`` must rebuild the loss from the current
    parameter values on each call.

    With ``kink_aware``, a probe whose +-eps evaluations change any ReLU
    activation pattern is repeated with eps/10 until the pattern is stable
    (or ``min_eps`` is reached): the central difference straddling a kink
    measures the average of two one-sided slopes, not the gradient.
    """
    if eps <= 0 or tol <= 0:
        raise ContractError(f"eps and tol must be positive, got eps={eps}, tol={tol}")
    loss = loss_fn()
    again = loss_fn()
    if loss.data.tobytes() != again.data.tobytes():
        raise DeterminismError(
            f"loss_fn returned {loss.item()!r} then {again.item()!r} for identical parameters")
    analytic = backward(loss, params)
    pattern = relu_pattern(loss) if kink_aware else b""

    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    checked = retries = 0
    for name, param in params.items():
        worst = 0.0
        for i in sample_indices(param.size, samples, rng):
            step = eps
            up, down = _central(loss_fn, param, int(i), step)
            if kink_aware and pattern:
                shrunk = False
                while step / 10 >= min_eps and (relu_pattern(up) != pattern
                                                or relu_pattern(down) != pattern):
                    step /= 10
                    shrunk = True
                    up, down = _central(loss_fn, param, int(i), step)
                retries += shrunk
            num = (up.item() - down.item()) / (2.0 * step)
            worst = max(worst, relative_error(float(analytic[name].flat[i]), num))
            checked += 1
        errors[name] = worst
    return GradCheckReport(tolerance=tol, errors=errors, checked=checked, kink_retries=retries)
