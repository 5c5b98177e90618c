"""Named parameter store and the Adam optimizer with global-norm clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Mapping

import numpy as np

from .tensor import NonFiniteError, Tensor

__all__ = ["ModelParams", "adam_step", "AdamState", "clip_by_global_norm", "lr_at_epoch"]


class ModelParams:
    """Ordered map of parameter name to a gradient-tracking :class:`Tensor`.

    Each entry also carries Adam first/second moment buffers of the same shape.
    """

    def __init__(self):
        self._entries: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True, name=name)
        self._entries[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def uniform(self, name: str, shape: tuple[int, ...], fan_in: int, rng: np.random.Generator) -> Tensor:
        bound = 1.0 / math.sqrt(fan_in)
        return self.add(name, rng.uniform(-bound, bound, size=shape))

    def zeros(self, name: str, shape: tuple[int, ...]) -> Tensor:
        return self.add(name, np.zeros(shape))

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def names(self) -> list[str]:
        return list(self._entries)

    def tensors(self) -> list[Tensor]:
        return list(self._entries.values())

    def num_scalars(self) -> int:
        return int(np.sum([t.size for t in self._entries.values()]))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._entries.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        missing = set(self._entries) - set(state)
        extra = set(state) - set(self._entries)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, t in self._entries.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"shape mismatch for {k}: expected {t.shape}, got {arr.shape}")
            t.data = arr.copy()


@dataclass
class AdamState:
    grad_norm: float
    clip_scale: float


def clip_by_global_norm(grads: Mapping[str, np.ndarray], clip_norm: float | None) -> tuple[dict, float, float]:
    norm = math.sqrt(float(np.sum([np.sum(g * g) for g in grads.values()])))
    scale = 1.0
    if clip_norm is not None and clip_norm > 0 and norm > clip_norm:
        scale = clip_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm, scale


def adam_step(
    params: ModelParams,
    grads: Mapping[str, np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    clip_norm: float | None = None,
) -> AdamState:
    """One bias-corrected Adam update, in place. Clipping happens before the moments."""
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {k!r}")
    grads, norm, scale = clip_by_global_norm(grads, clip_norm)
    params.step += 1
    t = params.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for k, g in grads.items():
        m = params.m[k] = beta1 * params.m[k] + (1.0 - beta1) * g
        v = params.v[k] = beta2 * params.v[k] + (1.0 - beta2) * g * g
        p = params[k]
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return AdamState(grad_norm=norm, clip_scale=scale)


def lr_at_epoch(epoch: int, base_lr: float, milestones=(10, 20, 30), gamma: float = 0.5) -> float:
    """Step schedule; ``epoch`` is 1-based and the rate drops once it reaches each milestone."""
    drops = len([m for m in milestones if epoch >= m])
    return base_lr * gamma**drops
