"""Temporal encoding and audio-visual fusion.

Pipeline per modality: gated recurrent temporal encoder, projection to the
fused width ``d``, multi-head self-attention with a residual, then
cross-modal relation attention whose keys/values are the audio and visual
sequences concatenated along time. An interaction layer (concat + linear +
ReLU, a simple stand-in for the interaction module) gives the fused features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .layers import linear, multi_head_attention
from .optim import ModelParams
from .tensor import Tensor

__all__ = [
    "TEMPORAL_MODES",
    "FusionConfig",
    "FusedFeatures",
    "init_gru",
    "gru",
    "init_temporal_encoder",
    "temporal_encode",
    "init_attention",
    "intra_modal_self_attention",
    "cross_modal_relation_attention",
    "interact",
    "init_fusion",
    "fuse",
]

TEMPORAL_MODES = ("none", "unidirectional_recurrent", "bidirectional_recurrent")
RECURRENT_CELL = "gru"


@dataclass
class FusionConfig:
    d: int = 256
    heads: int = 4
    temporal_mode: str = "bidirectional_recurrent"
    blocks: int = 1

    def validate(self) -> None:
        if self.temporal_mode == "snn":
            raise ValueError("fusion.temporal_mode 'snn' (spiking encoder) is not supported")
        if self.temporal_mode not in TEMPORAL_MODES:
            raise ValueError(f"fusion.temporal_mode must be one of {TEMPORAL_MODES}, got {self.temporal_mode!r}")
        if self.d < 1 or self.heads < 1 or self.d % self.heads:
            raise ValueError(f"fusion.d={self.d} must be a positive multiple of fusion.heads={self.heads}")
        if self.blocks < 1:
            raise ValueError(f"fusion.blocks must be >= 1, got {self.blocks}")


@dataclass
class FusedFeatures:
    F_av: Tensor
    F_FT: Tensor | None = None
    F_o: Tensor | None = None


# ----------------------------------------------------------- temporal encoder


def init_gru(params: ModelParams, prefix: str, n_in: int, hidden: int, rng: np.random.Generator) -> None:
    for gate in ("z", "r", "h"):
        params.uniform(f"{prefix}.w_{gate}", (n_in, hidden), n_in, rng)
        params.uniform(f"{prefix}.u_{gate}", (hidden, hidden), hidden, rng)
        params.zeros(f"{prefix}.b_{gate}", (hidden,))


def gru(x: Tensor, params: ModelParams, prefix: str, reverse: bool = False) -> Tensor:
    """Gated recurrent pass over axis -2 of (..., T, n). Returns (..., T, hidden)."""
    p = lambda name: params[f"{prefix}.{name}"]  # noqa: E731
    T = x.shape[-2]
    hidden = p("u_z").shape[0]
    # input contributions for all steps at once
    xz, xr, xh = x @ p("w_z") + p("b_z"), x @ p("w_r") + p("b_r"), x @ p("w_h") + p("b_h")
    h = tn.Tensor(np.zeros(x.shape[:-2] + (hidden,)))
    outs: list[Tensor] = [None] * T  # type: ignore[list-item]
    steps = range(T - 1, -1, -1) if reverse else range(T)
    for t in steps:
        z = tn.sigmoid(xz[..., t, :] + h @ p("u_z"))
        r = tn.sigmoid(xr[..., t, :] + h @ p("u_r"))
        cand = tn.tanh(xh[..., t, :] + (r * h) @ p("u_h"))
        h = h + z * (cand - h)
        outs[t] = h
    return tn.stack(outs, axis=-2)


def init_temporal_encoder(params: ModelParams, prefix: str, n: int, mode: str, rng: np.random.Generator) -> None:
    if mode == "none":
        return
    init_gru(params, f"{prefix}.fwd", n, n, rng)
    if mode == "bidirectional_recurrent":
        init_gru(params, f"{prefix}.bwd", n, n, rng)
        params.uniform(f"{prefix}.proj_w", (n, 2 * n), 2 * n, rng)
        params.zeros(f"{prefix}.proj_b", (n,))


def temporal_encode(x: Tensor, mode: str, params: ModelParams | None = None, prefix: str = "") -> Tensor:
    """Width-preserving temporal encoder on (..., T, n).

    ``none`` is the identity; ``unidirectional_recurrent`` returns forward GRU
    states (hidden = n); ``bidirectional_recurrent`` concatenates forward and
    backward states and projects 2n -> n.
    """
    if mode == "none":
        return tn.as_tensor(x)
    if mode not in TEMPORAL_MODES:
        raise ValueError(f"unknown temporal mode {mode!r}")
    fwd = gru(x, params, f"{prefix}.fwd")
    if mode == "unidirectional_recurrent":
        return fwd
    bwd = gru(x, params, f"{prefix}.bwd", reverse=True)
    both = tn.concat([fwd, bwd], axis=-1)
    return linear(both, params[f"{prefix}.proj_w"], params[f"{prefix}.proj_b"])


# ------------------------------------------------------------------ attention


def init_attention(params: ModelParams, prefix: str, d: int, rng: np.random.Generator) -> None:
    for name in ("wq", "wk", "wv", "wo"):
        params.uniform(f"{prefix}.{name}", (d, d), d, rng)


def _mha_weights(params: ModelParams, prefix: str):
    return tuple(params[f"{prefix}.{n}"] for n in ("wq", "wk", "wv", "wo"))


def intra_modal_self_attention(x: Tensor, params: ModelParams, prefix: str, heads: int) -> tuple[Tensor, Tensor]:
    """x + MultiHead(x, x, x). Returns (output, attention weights)."""
    out, w = multi_head_attention(x, x, *_mha_weights(params, prefix), heads=heads)
    return x + out, w


def cross_modal_relation_attention(
    x: Tensor, a_feat: Tensor, v_feat: Tensor, params: ModelParams, prefix: str, heads: int
) -> tuple[Tensor, Tensor]:
    """Query ``x`` against [a_feat; v_feat] stacked along time (2T keys), plus residual."""
    if not (x.shape[-1] == a_feat.shape[-1] == v_feat.shape[-1]):
        raise ValueError(f"width mismatch: {x.shape}, {a_feat.shape}, {v_feat.shape}")
    kv = tn.concat([a_feat, v_feat], axis=-2)
    out, w = multi_head_attention(x, kv, *_mha_weights(params, prefix), heads=heads)
    return x + out, w


def interact(a_out: Tensor, v_out: Tensor, w_i: Tensor, b_i: Tensor) -> Tensor:
    """F_av = relu(W_i [a_out; v_out] + b_i), W_i of shape (d, 2d)."""
    if a_out.shape != v_out.shape:
        raise ValueError(f"interact needs equal shapes, got {a_out.shape} and {v_out.shape}")
    return tn.relu(linear(tn.concat([a_out, v_out], axis=-1), w_i, b_i))


# ------------------------------------------------------------------- assembly


def init_fusion(params: ModelParams, cfg: FusionConfig, d_v: int, d_a: int, rng: np.random.Generator) -> None:
    d = cfg.d
    init_temporal_encoder(params, "temporal.v", d_v, cfg.temporal_mode, rng)
    init_temporal_encoder(params, "temporal.a", d_a, cfg.temporal_mode, rng)
    params.uniform("proj.v_w", (d, d_v), d_v, rng)
    params.zeros("proj.v_b", (d,))
    params.uniform("proj.a_w", (d, d_a), d_a, rng)
    params.zeros("proj.a_b", (d,))
    for b in range(cfg.blocks):
        for name in ("self_a", "self_v", "cross_a", "cross_v"):
            init_attention(params, f"fusion{b}.{name}", d, rng)
    params.uniform("interact.w", (d, 2 * d), 2 * d, rng)
    params.zeros("interact.b", (d,))


def encode_modalities(v: Tensor, a: Tensor, cfg: FusionConfig, params: ModelParams) -> tuple[Tensor, Tensor]:
    """Temporal encoder then projection to width d, for both modalities."""
    v = temporal_encode(v, cfg.temporal_mode, params, "temporal.v")
    a = temporal_encode(a, cfg.temporal_mode, params, "temporal.a")
    v = tn.relu(linear(v, params["proj.v_w"], params["proj.v_b"]))
    a = tn.relu(linear(a, params["proj.a_w"], params["proj.a_b"]))
    return v, a


def fuse(v: Tensor, a: Tensor, cfg: FusionConfig, params: ModelParams) -> tuple[Tensor, dict[str, Tensor]]:
    """Fusion stack on width-d sequences (..., T, d). Returns F_av and attention maps."""
    maps: dict[str, Tensor] = {}
    for b in range(cfg.blocks):
        pre = f"fusion{b}"
        a1, maps[f"{pre}.self_a"] = intra_modal_self_attention(a, params, f"{pre}.self_a", cfg.heads)
        v1, maps[f"{pre}.self_v"] = intra_modal_self_attention(v, params, f"{pre}.self_v", cfg.heads)
        a, maps[f"{pre}.cross_a"] = cross_modal_relation_attention(a1, a1, v1, params, f"{pre}.cross_a", cfg.heads)
        v, maps[f"{pre}.cross_v"] = cross_modal_relation_attention(v1, a1, v1, params, f"{pre}.cross_v", cfg.heads)
    return interact(a, v, params["interact.w"], params["interact.b"]), maps
