"""Central finite-difference check of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .optim import ModelParams
from .tensor import Tape, Tensor

__all__ = ["GradCheckError", "GradCheckReport", "grad_check", "relative_error"]


class GradCheckError(RuntimeError):
    pass


def relative_error(g_ad: np.ndarray, g_fd: np.ndarray) -> np.ndarray:
    denom = np.maximum(1.0, np.maximum(np.abs(g_ad), np.abs(g_fd)))
    return np.abs(g_ad - g_fd) / denom


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    n_evaluations: int = 0

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.worst < tol

    def lines(self) -> list[str]:
        width = max((len(k) for k in self.max_rel_error), default=0)
        return [f"{k:<{width}}  {v:.3e}" for k, v in self.max_rel_error.items()]


def _value(f: Callable[[], Tensor], name: str) -> float:
    val = float(f().data)
    if not np.isfinite(val):
        raise GradCheckError(f"non-finite loss while perturbing parameter {name!r}")
    return val


def grad_check(
    f: Callable[[], Tensor],
    params: ModelParams,
    h: float = 1e-5,
    names: list[str] | None = None,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f()`` against central differences.

    The step for entry w is ``h * max(1, |w|)``. ``f`` must be deterministic
    and read the parameters from ``params``.
    """
    names = params.names() if names is None else names
    tensors = [params[n] for n in names]
    with Tape() as tape:
        loss = f()
    if not np.isfinite(loss.data).all():
        raise GradCheckError("non-finite loss at the unperturbed point")
    analytic = tape.gradient(loss, tensors)
    del tape

    report = GradCheckReport()
    for name, t, g_ad in zip(names, tensors, analytic):
        t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)  # view: writes perturb the parameter
        g_fd = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            step = h * max(1.0, abs(orig))
            flat[i] = orig + step
            up = _value(f, name)
            flat[i] = orig - step
            down = _value(f, name)
            flat[i] = orig
            g_fd[i] = (up - down) / (2.0 * step)
        report.n_evaluations += 2 * flat.size
        err = relative_error(g_ad.reshape(-1), g_fd)
        report.max_rel_error[name] = float(err.max()) if err.size else 0.0
    return report
