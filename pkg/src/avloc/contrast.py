"""Background-event contrast enhancement and the paired InfoNCE loss.

Each video forms its own contrast group of 2T samples: the T fused segment
features plus one augmented copy of each. Positives:

* a background sample pairs only with its own counterpart (original <-> augmented);
* an event sample pairs with every other event-labelled sample in the group.

The contrastive loss uses the mean-inside-log form
``-log( mean_{k in K(i)} exp(s_ik) / sum_{p != i} exp(s_ip) )`` averaged over
the 2T anchors, with raw dot products s = f_i . f_j / tau.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .layers import linear
from .optim import ModelParams
from .tensor import Tensor

__all__ = [
    "AUGMENTATIONS",
    "ContrastConfig",
    "ContrastGroup",
    "augment",
    "augment_sequence",
    "build_positive_sets",
    "positive_mask",
    "supcon_loss",
    "supcon_loss_batch",
    "init_projection",
    "project",
    "merge",
    "infonce_loss",
]

AUGMENTATIONS = ("gaussian", "channel_mask", "mixup")


@dataclass
class ContrastConfig:
    tau: float = 0.5
    lam: float = 0.6
    weight: float = 1.0
    augmentation: str = "gaussian"
    sigma: float = 0.1
    mask_p: float = 0.2
    mixup_alpha: float = 0.4
    normalize: bool = False
    infonce_tau: float = 0.1

    def validate(self) -> None:
        if not self.tau > 0:
            raise ValueError(f"contrast.tau must be > 0, got {self.tau}")
        if not self.infonce_tau > 0:
            raise ValueError(f"contrast.infonce_tau must be > 0, got {self.infonce_tau}")
        if self.augmentation not in AUGMENTATIONS:
            raise ValueError(f"contrast.augmentation must be one of {AUGMENTATIONS}, got {self.augmentation!r}")
        if not self.sigma >= 0:
            raise ValueError(f"contrast.sigma must be >= 0, got {self.sigma}")
        if not 0 <= self.mask_p <= 1:
            raise ValueError(f"contrast.mask_p must lie in [0, 1], got {self.mask_p}")
        if not self.mixup_alpha > 0:
            raise ValueError(f"contrast.mixup_alpha must be > 0, got {self.mixup_alpha}")
        for key in ("lam", "weight"):
            if not math.isfinite(getattr(self, key)):
                raise ValueError(f"contrast.{key} must be finite")


@dataclass
class ContrastGroup:
    """One video's originals (rows 0..T-1) followed by their augmentations (rows T..2T-1)."""

    features: np.ndarray  # (2T, d)
    is_event: np.ndarray  # (T,) bool, for the originals

    def __post_init__(self):
        self.is_event = np.asarray(self.is_event, dtype=bool)
        if self.is_event.size == 0:
            raise ValueError("empty contrast group")
        if self.features is not None and len(self.features) != 2 * self.is_event.size:
            raise ValueError(f"group needs 2T={2 * self.is_event.size} features, got {len(self.features)}")

    @property
    def T(self) -> int:
        return self.is_event.size

    def counterpart(self, i: int) -> int:
        return i + self.T if i < self.T else i - self.T

    def labels(self) -> np.ndarray:
        return np.concatenate([self.is_event, self.is_event])


# --------------------------------------------------------------- augmentation


def augment(f, method: str, seed, *, sigma: float = 0.1, p: float = 0.2, alpha: float = 0.4, partner=None) -> np.ndarray:
    """Augment a single feature vector (plain arrays, no gradient).

    ``mixup`` needs ``partner``, another feature from the same group.
    """
    f = np.asarray(f, dtype=np.float64)
    rng = np.random.default_rng(seed)
    if method == "gaussian":
        if sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {sigma}")
        return f + sigma * rng.standard_normal(f.shape)
    if method == "channel_mask":
        if not 0 <= p <= 1:
            raise ValueError(f"mask probability must lie in [0, 1], got {p}")
        return f * (rng.random(f.shape) >= p)
    if method == "mixup":
        if partner is None:
            raise ValueError("mixup needs a partner feature")
        if alpha <= 0:
            raise ValueError(f"alpha must be > 0, got {alpha}")
        lam = rng.beta(alpha, alpha)
        return lam * f + (1.0 - lam) * np.asarray(partner, dtype=np.float64)
    raise ValueError(f"unknown augmentation {method!r}")


def augment_sequence(F: Tensor, cfg: ContrastConfig, rng: np.random.Generator) -> Tensor:
    """Augment every segment of (..., T, d) fused features; gradients flow to ``F``."""
    shape = F.shape
    if cfg.augmentation == "gaussian":
        return F + cfg.sigma * rng.standard_normal(shape)
    if cfg.augmentation == "channel_mask":
        return F * (rng.random(shape) >= cfg.mask_p).astype(np.float64)
    # mixup with another segment of the same video, as a fixed mixing matrix
    T = shape[-2]
    lead = shape[:-2]
    mix = np.zeros(lead + (T, T))
    lam = rng.beta(cfg.mixup_alpha, cfg.mixup_alpha, size=lead + (T,))
    for pos in np.ndindex(*lead) if lead else [()]:
        partners = rng.integers(0, T - 1, size=T) if T > 1 else np.zeros(1, dtype=int)
        if T > 1:
            partners = partners + (partners >= np.arange(T))  # skip self
        for t in range(T):
            mix[pos + (t, t)] += lam[pos + (t,)]
            mix[pos + (t, partners[t])] += 1.0 - lam[pos + (t,)]
    return tn.as_tensor(mix) @ F


# ------------------------------------------------------------- positive sets


def build_positive_sets(group: ContrastGroup) -> dict[int, list[int]]:
    """Map each sample index (0..2T-1) to its sorted positive set K(i)."""
    labels = group.labels()
    event_idx = np.flatnonzero(labels)
    out: dict[int, list[int]] = {}
    for i in range(2 * group.T):
        if labels[i]:
            out[i] = [int(k) for k in event_idx if k != i]
        else:
            out[i] = [group.counterpart(i)]
    return out


def positive_mask(is_event: np.ndarray) -> np.ndarray:
    """Vectorised K(i) for (..., T) event flags: a (..., 2T, 2T) boolean mask."""
    ev = np.asarray(is_event, dtype=bool)
    T = ev.shape[-1]
    lab = np.concatenate([ev, ev], axis=-1)
    eye = np.eye(2 * T, dtype=bool)
    pair = np.roll(eye, T, axis=1)  # i <-> i +/- T
    events = lab[..., :, None] & lab[..., None, :] & ~eye
    return np.where(lab[..., :, None], events, pair)


# ---------------------------------------------------------------------- loss


def _normalize(f: Tensor) -> Tensor:
    inv_norm = tn.exp(tn.scale(tn.log(tn.sum(f * f, axis=-1, keepdims=True) + 1e-12), -0.5))
    return f * inv_norm


def supcon_loss_batch(f: Tensor, is_event: np.ndarray, tau: float, normalize: bool = False) -> Tensor:
    """Contrastive loss for (..., 2T, d) groups; averaged over anchors and then over groups."""
    if normalize:
        f = _normalize(f)
    n = f.shape[-2]
    pos = positive_mask(is_event)
    if not pos.any(axis=-1).all():
        bad = np.argwhere(~pos.any(axis=-1))[0]
        raise ValueError(f"sample {tuple(int(b) for b in bad)} has an empty positive set")
    sim = (f @ f.T) * (1.0 / tau)
    others = ~np.eye(n, dtype=bool)
    counts = pos.sum(axis=-1)
    per_anchor = tn.logsumexp(sim, axis=-1, mask=others) - tn.logsumexp(sim, axis=-1, mask=pos) + np.log(counts)
    return tn.mean(per_anchor)


def supcon_loss(group: ContrastGroup, tau: float, normalize: bool = False) -> Tensor:
    return supcon_loss_batch(tn.as_tensor(group.features), group.is_event, tau, normalize)


# ---------------------------------------------------------- projection/merge


def init_projection(params: ModelParams, d: int, rng: np.random.Generator, prefix: str = "contrast") -> None:
    params.uniform(f"{prefix}.w_p", (d, d), d, rng)
    params.zeros(f"{prefix}.b_p", (d,))


def project(F_av: Tensor, w_p: Tensor, b_p: Tensor) -> Tensor:
    """The single nonlinear layer shared by queries and keys: relu(W_p F + b_p)."""
    return tn.relu(linear(F_av, w_p, b_p))


def merge(F_av: Tensor, F_FT: Tensor, lam: float) -> Tensor:
    return F_av + tn.scale(F_FT, lam)


def infonce_loss(f_visual, f_audio, tau: float) -> Tensor:
    """Visual-to-audio InfoNCE over B paired rows: -mean_i log softmax_j(f_i^V . f_j^A / tau)[i]."""
    fv, fa = tn.as_tensor(f_visual), tn.as_tensor(f_audio)
    if fv.shape != fa.shape:
        raise ValueError(f"paired features need equal shapes, got {fv.shape} and {fa.shape}")
    B = fv.shape[0]
    if B == 0:
        raise ValueError("infonce_loss needs at least one pair")
    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    logits = (fv @ fa.T) * (1.0 / tau)
    diag = tn.sum(logits * np.eye(B), axis=-1)
    return tn.mean(tn.logsumexp(logits, axis=-1) - diag)
