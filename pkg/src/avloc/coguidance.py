"""Audio-visual co-guidance attention.

Audio steers which visual channels and positions matter; pooled global visual
features in turn pick out the audio frames that agree with the picture.

Shapes. Visual features are (..., T, d_v, S) with S = H*W spatial positions
(a single segment drops the T axis). Audio is (..., T, d_a).

The audio-guided channel-spatial visual feature (``audio_guided_visual``) is a
stand-in: a sigmoid channel gate driven by the audio vector followed by an
audio-queried softmax over spatial positions. It keeps the channel-then-spatial
factorization but is not a reproduction of any particular published layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .layers import attend
from .optim import ModelParams
from .tensor import Tensor

__all__ = [
    "GUIDANCE_MODES",
    "GuidanceConfig",
    "GuidedFeatures",
    "init_coguidance",
    "visual_spatial_self_attention",
    "squeeze_spatial",
    "channel_calibration",
    "audio_guided_visual",
    "apply_visual_calibration",
    "audio_temporal_self_attention",
    "visual_query_audio",
    "apply_audio_calibration",
    "avca_forward",
]

GUIDANCE_MODES = ("none", "visual_only", "audio_only", "full")


@dataclass
class GuidanceConfig:
    mode: str = "full"
    beta: float = 0.4
    psi: float = 0.3
    d: int = 256
    scaled_audio_attention: bool = False

    def validate(self) -> None:
        if self.mode not in GUIDANCE_MODES:
            raise ValueError(f"guidance.mode must be one of {GUIDANCE_MODES}, got {self.mode!r}")
        for key in ("beta", "psi"):
            val = getattr(self, key)
            if not math.isfinite(val) or val < 0:
                raise ValueError(f"guidance.{key} must be finite and >= 0, got {val}")
        if self.d < 1:
            raise ValueError(f"guidance.d must be positive, got {self.d}")


@dataclass
class GuidedFeatures:
    v: Tensor
    a: Tensor
    intermediates: dict[str, Tensor] = field(default_factory=dict)


def init_coguidance(params: ModelParams, d_v: int, d_a: int, d: int, rng: np.random.Generator, prefix: str = "avca") -> None:
    p = prefix
    for name in ("wq", "wk", "wv"):
        params.uniform(f"{p}.spatial.{name}", (d_v, d_v), d_v, rng)
    params.uniform(f"{p}.w1", (d, d_v), d_v, rng)
    params.uniform(f"{p}.w2", (d, d_v), d_v, rng)
    params.uniform(f"{p}.u_v", (1, d), d, rng)
    params.uniform(f"{p}.agv.w_c", (d_v, d_a), d_a, rng)
    params.uniform(f"{p}.agv.p_a", (d, d_a), d_a, rng)
    params.uniform(f"{p}.agv.p_v", (d, d_v), d_v, rng)
    for name in ("wq", "wk", "wv"):
        params.uniform(f"{p}.temporal.{name}", (d_a, d_a), d_a, rng)
    params.uniform(f"{p}.cross.wq_v", (d_v, d_a), d_v, rng)
    params.uniform(f"{p}.cross.wk_a", (d_a, d_a), d_a, rng)
    params.uniform(f"{p}.cross.wv_a", (d_a, d_a), d_a, rng)


def visual_spatial_self_attention(v: Tensor, wq: Tensor, wk: Tensor, wv: Tensor) -> tuple[Tensor, Tensor]:
    """Self-attention across the spatial columns of (..., d_v, S).

    Projections act on each column (x -> W x). Returns v^g with the input's
    shape and the (..., S, S) attention weights.
    """
    cols = v.T  # (..., S, d_v)
    out, w = attend(cols @ wq.T, cols @ wk.T, cols @ wv.T, scale=1.0 / math.sqrt(v.shape[-2]))
    return out.T, w


def squeeze_spatial(v_g: Tensor) -> Tensor:
    return tn.mean(v_g, axis=-1)


def channel_calibration(v_g: Tensor, w1: Tensor, w2: Tensor, u_v: Tensor) -> tuple[Tensor, dict[str, Tensor]]:
    """Channel-level calibration vector from global spatial features.

    v^gc = relu(W1 F_sq(v^g)) * relu(W2 v^g)   (d-vector repeated over S)
    scores = softmax_S(tanh(U_v v^gc))
    result = scores @ (v^g)^T                  (a d_v vector)
    """
    pooled = tn.relu(squeeze_spatial(v_g) @ w1.T)  # (..., d)
    spatial = tn.relu(w2 @ v_g)  # (..., d, S)
    v_gc = tn.reshape(pooled, pooled.shape + (1,)) * spatial
    scores = tn.softmax(tn.tanh(u_v @ v_gc), axis=-1)  # (..., 1, S)
    vt_g = scores @ v_g.T  # (..., 1, d_v)
    vt_g = tn.reshape(vt_g, vt_g.shape[:-2] + vt_g.shape[-1:])
    return vt_g, {"v_gc": v_gc, "spatial_scores": scores}


def audio_guided_visual(v: Tensor, a_t: Tensor, w_c: Tensor, p_a: Tensor, p_v: Tensor) -> tuple[Tensor, dict[str, Tensor]]:
    """Audio-conditioned channel gate, then audio-queried spatial pooling.

    v: (..., d_v, S); a_t: (..., d_a). Returns v^cs (..., d_v).
    """
    gate = tn.sigmoid(a_t @ w_c.T)  # (..., d_v)
    gated = tn.reshape(gate, gate.shape + (1,)) * v  # (..., d_v, S)
    query = a_t @ p_a.T  # (..., h)
    query = tn.reshape(query, query.shape[:-1] + (1, query.shape[-1]))
    keys = p_v @ gated  # (..., h, S)
    weights = tn.softmax(query @ keys, axis=-1)  # (..., 1, S)
    v_cs = weights @ gated.T  # (..., 1, d_v)
    v_cs = tn.reshape(v_cs, v_cs.shape[:-2] + v_cs.shape[-1:])
    return v_cs, {"channel_gate": gate, "agv_weights": weights}


def apply_visual_calibration(v_cs: Tensor, vt_g: Tensor, beta: float) -> Tensor:
    return v_cs + tn.sigmoid(vt_g) * v_cs * beta


def audio_temporal_self_attention(
    a: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, scaled: bool = False
) -> tuple[Tensor, Tensor]:
    """a^g = softmax(q K^T) V with q = a W^Q, K = a W^K, V = a W^V. No 1/sqrt(d) unless ``scaled``."""
    scale = 1.0 / math.sqrt(a.shape[-1]) if scaled else None
    return attend(a @ wq, a @ wk, a @ wv, scale=scale)


def visual_query_audio(
    v_gp: Tensor, a_g: Tensor, wq_v: Tensor, wk_a: Tensor, wv_a: Tensor, scaled: bool = False
) -> tuple[Tensor, Tensor]:
    """Pooled visual features (..., T, d_v) query the globally attended audio (..., T, d_a)."""
    scale = 1.0 / math.sqrt(a_g.shape[-1]) if scaled else None
    return attend(v_gp @ wq_v, a_g @ wk_a, a_g @ wv_a, scale=scale)


def apply_audio_calibration(a: Tensor, at_g: Tensor, psi: float) -> Tensor:
    return a + tn.sigmoid(at_g) * a * psi


def avca_forward(v: Tensor, a: Tensor, cfg: GuidanceConfig, params: ModelParams, prefix: str = "avca") -> GuidedFeatures:
    """Run the co-guidance block on visual (..., T, d_v, S) and audio (..., T, d_a)."""
    v, a = tn.as_tensor(v), tn.as_tensor(a)
    if v.shape[:-2] != a.shape[:-1]:
        raise ValueError(f"segment count mismatch: visual {v.shape} vs audio {a.shape}")
    p = lambda name: params[f"{prefix}.{name}"]  # noqa: E731
    inter: dict[str, Tensor] = {}

    visual_guided = cfg.mode in ("visual_only", "full")
    audio_guided = cfg.mode in ("audio_only", "full")

    if visual_guided or audio_guided:
        v_g, w_sp = visual_spatial_self_attention(v, p("spatial.wq"), p("spatial.wk"), p("spatial.wv"))
        inter.update(v_g=v_g, spatial_attention=w_sp)

    if visual_guided:
        vt_g, extra = channel_calibration(v_g, p("w1"), p("w2"), p("u_v"))
        v_cs, extra2 = audio_guided_visual(v, a, p("agv.w_c"), p("agv.p_a"), p("agv.p_v"))
        inter.update(extra, **extra2, vt_g=vt_g, v_cs=v_cs)
        v_out = apply_visual_calibration(v_cs, vt_g, cfg.beta)
    else:
        v_out = squeeze_spatial(v)

    if audio_guided:
        a_g, w_t = audio_temporal_self_attention(
            a, p("temporal.wq"), p("temporal.wk"), p("temporal.wv"), cfg.scaled_audio_attention
        )
        v_gp = squeeze_spatial(v_g)
        at_g, w_x = visual_query_audio(
            v_gp, a_g, p("cross.wq_v"), p("cross.wk_a"), p("cross.wv_a"), cfg.scaled_audio_attention
        )
        inter.update(a_g=a_g, temporal_attention=w_t, v_gp=v_gp, at_g=at_g, cross_attention=w_x)
        a_out = apply_audio_calibration(a, at_g, cfg.psi)
    else:
        a_out = a

    return GuidedFeatures(v=v_out, a=a_out, intermediates=inter)
