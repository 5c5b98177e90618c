"""Classification heads, the training objective, inference and the accuracy metric.

Labels are integer arrays with one entry per segment: the category index for
event segments and ``BACKGROUND`` (-1) otherwise. The video-level category is
carried separately.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .layers import linear
from .tensor import NonFiniteError, Tensor

__all__ = [
    "BACKGROUND",
    "EPS",
    "event_score",
    "category_logits",
    "category_score",
    "binary_cross_entropy",
    "background_suppression_loss",
    "category_cross_entropy",
    "LossBreakdown",
    "total_loss",
    "infer",
    "segment_accuracy",
    "confusion_counts",
    "one_hot_labels",
]

BACKGROUND = -1
EPS = 1e-7


def event_score(F_o: Tensor, w3: Tensor, b3: Tensor | None = None) -> Tensor:
    """Per-segment event probability sigma(W3 F_o): (..., T, d) -> (..., T)."""
    z = linear(F_o, w3, b3)
    return tn.sigmoid(tn.reshape(z, z.shape[:-1]))


def category_logits(F_av: Tensor, w4: Tensor, b4: Tensor | None = None) -> tuple[Tensor, np.ndarray]:
    """Temporal max-pool then linear; ``w4`` is (d, C). Returns (logits, argmax rows)."""
    pooled, idx = tn.max(F_av, axis=-2)
    z = pooled @ w4
    if b4 is not None:
        z = z + b4
    return z, idx


def category_score(F_av: Tensor, w4: Tensor, b4: Tensor | None = None) -> Tensor:
    z, _ = category_logits(F_av, w4, b4)
    return tn.softmax(z, axis=-1)


def binary_cross_entropy(p: Tensor, target, eps: float = EPS) -> Tensor:
    """Elementwise BCE on probabilities clamped to [eps, 1 - eps]."""
    p = tn.clip(tn.as_tensor(p), eps, 1.0 - eps)
    y = np.asarray(target, dtype=np.float64)
    return tn.neg(tn.log(p) * y + tn.log(1.0 - p) * (1.0 - y))


def background_suppression_loss(y_a: Tensor, y_v: Tensor, labels) -> Tensor:
    """Per-modality agreement with the event bit: mean over modalities and segments of BCE.

    This stands in for a background-suppression term whose exact form is not
    reproduced here. Batched inputs (B, T) give the mean over videos as well.
    """
    is_event = np.asarray(labels) != BACKGROUND
    both = binary_cross_entropy(y_a, is_event) + binary_cross_entropy(y_v, is_event)
    return tn.scale(tn.mean(both), 0.5)


def category_cross_entropy(logits: Tensor, categories) -> Tensor:
    """Mean over videos of -log softmax(logits)[category]."""
    cats = np.asarray(categories)
    C = logits.shape[-1]
    onehot = np.eye(C)[cats]
    picked = tn.sum(logits * onehot, axis=-1)
    return tn.mean(tn.logsumexp(logits, axis=-1) - picked)


@dataclass
class LossBreakdown:
    total: Tensor
    category: Tensor
    event: Tensor
    sup: Tensor | None = None
    contrast: Tensor | None = None

    def values(self) -> dict[str, float]:
        out = {"loss": float(self.total.data), "loss_category": float(self.category.data), "loss_event": float(self.event.data)}
        out["loss_sup"] = float(self.sup.data) if self.sup is not None else 0.0
        out["loss_contrast"] = float(self.contrast.data) if self.contrast is not None else 0.0
        return out


def total_loss(
    event_probs: Tensor,
    logits: Tensor,
    labels,
    categories,
    *,
    y_a: Tensor | None = None,
    y_v: Tensor | None = None,
    contrast: Tensor | None = None,
    contrast_weight: float = 1.0,
) -> LossBreakdown:
    """L = L^c + mean_t(L^e_t + L^sup_t) + weight * L^contrast, averaged over videos.

    ``y_a``/``y_v`` enable the suppression term; ``contrast`` is the already
    averaged contrastive loss.
    """
    labels = np.asarray(labels)
    is_event = labels != BACKGROUND
    parts: dict[str, Tensor] = {}
    parts["category"] = category_cross_entropy(logits, categories)
    parts["event"] = tn.mean(binary_cross_entropy(event_probs, is_event))
    total = parts["category"] + parts["event"]
    if y_a is not None and y_v is not None:
        parts["sup"] = background_suppression_loss(y_a, y_v, labels)
        total = total + parts["sup"]
    if contrast is not None:
        parts["contrast"] = contrast
        total = total + tn.scale(contrast, contrast_weight)
    for name, t in parts.items():
        if not math.isfinite(float(t.data)):
            raise NonFiniteError(f"loss component {name!r} is not finite")
    return LossBreakdown(total=total, **parts)


def infer(event_probs, category_probs, theta: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """o_t = H(y_t - theta) * y_c with H(0) = 1.

    Accepts (T,) and (C,) or batched (B, T) and (B, C). Returns outputs
    (..., T, C) and decisions (..., T): ``BACKGROUND`` or the argmax category.
    """
    y = np.asarray(event_probs, dtype=np.float64)
    yc = np.asarray(category_probs, dtype=np.float64)
    on = (y - theta >= 0).astype(np.float64)
    outputs = on[..., :, None] * yc[..., None, :]
    cat = np.argmax(yc, axis=-1)
    decisions = np.where(on > 0, cat[..., None], BACKGROUND)
    return outputs, decisions


def segment_accuracy(preds, labels) -> float:
    p = np.asarray(preds)
    y = np.asarray(labels)
    if p.shape != y.shape:
        raise ValueError(f"prediction/label shape mismatch: {p.shape} vs {y.shape}")
    if p.size == 0:
        return 0.0
    return float(np.mean(p == y))


def confusion_counts(preds, labels) -> dict[str, int]:
    """Error breakdown: background<->event confusions and wrong-category events."""
    p = np.asarray(preds).ravel()
    y = np.asarray(labels).ravel()
    bg_p, bg_y = p == BACKGROUND, y == BACKGROUND
    return {
        "correct": int(np.sum(p == y)),
        "background_as_event": int(np.sum(bg_y & ~bg_p)),
        "event_as_background": int(np.sum(~bg_y & bg_p)),
        "wrong_category": int(np.sum(~bg_y & ~bg_p & (p != y))),
    }


def one_hot_labels(labels, num_classes: int) -> np.ndarray:
    """(T,) integer labels -> (T, C+1) one-hot rows, background in the last column."""
    lab = np.asarray(labels)
    cols = np.where(lab == BACKGROUND, num_classes, lab)
    return np.eye(num_classes + 1, dtype=np.int64)[cols]
