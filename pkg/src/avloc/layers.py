"""Small building blocks shared by the network modules."""

from __future__ import annotations

import math

from . import tensor as tn
from .tensor import Tensor

__all__ = ["attend", "linear", "multi_head_attention"]


def attend(q: Tensor, k: Tensor, v: Tensor, scale: float | None = None) -> tuple[Tensor, Tensor]:
    """softmax(q k^T * scale) v over the last two axes. Returns (output, weights)."""
    logits = q @ k.T
    if scale is not None:
        logits = logits * scale
    w = tn.softmax(logits, axis=-1)
    return w @ v, w


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight^T + bias, with ``weight`` stored as (out, in)."""
    y = x @ weight.T
    if bias is not None:
        y = y + bias
    return y


def multi_head_attention(
    query: Tensor,
    key_value: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    heads: int,
) -> tuple[Tensor, Tensor]:
    """Bias-free multi-head scaled dot-product attention on (..., T, d) inputs.

    Returns the projected output (..., T, d) and the weights (..., heads, T, Tk).
    """
    d = query.shape[-1]
    if d % heads:
        raise ValueError(f"width {d} is not divisible by heads={heads}")
    dh = d // heads
    lead = query.shape[:-2]
    tq, tk = query.shape[-2], key_value.shape[-2]

    def split(x: Tensor, t: int) -> Tensor:
        return tn.swapaxes(x.reshape(*lead, t, heads, dh), -2, -3)

    q = split(query @ wq, tq)
    k = split(key_value @ wk, tk)
    v = split(key_value @ wv, tk)
    out, w = attend(q, k, v, scale=1.0 / math.sqrt(dh))
    out = tn.swapaxes(out, -2, -3).reshape(*lead, tq, d)
    return out @ wo, w
