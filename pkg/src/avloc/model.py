"""The full localization network: co-guidance, fusion, contrast enhancement, heads."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .coguidance import GuidanceConfig, GuidedFeatures, avca_forward, init_coguidance
from .contrast import ContrastConfig, augment_sequence, init_projection, merge, project, supcon_loss_batch
from .fusion import FusedFeatures, FusionConfig, encode_modalities, fuse, init_fusion
from .localization import LossBreakdown, category_logits, event_score, infer, total_loss
from .optim import ModelParams
from .tensor import Tensor

__all__ = ["ModelConfig", "ModelOutput", "init_model", "forward", "compute_loss", "predict"]


@dataclass
class ModelConfig:
    d_v: int = 512
    d_a: int = 128
    H: int = 7
    W: int = 7
    num_classes: int = 28
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    contrast: ContrastConfig = field(default_factory=ContrastConfig)
    use_sup: bool = True
    theta: float = 0.5

    @property
    def S(self) -> int:
        return self.H * self.W

    def validate(self) -> None:
        for key in ("d_v", "d_a", "H", "W", "num_classes"):
            if getattr(self, key) < 1:
                raise ValueError(f"model.{key} must be positive, got {getattr(self, key)}")
        if not 0 < self.theta <= 1:
            raise ValueError(f"infer.theta must lie in (0, 1], got {self.theta}")
        self.guidance.validate()
        self.fusion.validate()
        self.contrast.validate()


@dataclass
class ModelOutput:
    event_probs: Tensor  # (B, T)
    logits: Tensor  # (B, C)
    fused: FusedFeatures
    guided: GuidedFeatures
    y_a: Tensor | None = None
    y_v: Tensor | None = None
    contrast: Tensor | None = None
    attention: dict[str, Tensor] = field(default_factory=dict)

    @property
    def category_probs(self) -> np.ndarray:
        z = self.logits.data
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)


def init_model(cfg: ModelConfig, seed: int) -> ModelParams:
    """Uniform(+-1/sqrt(fan_in)) weights and zero biases from a seeded generator."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    params = ModelParams()
    d = cfg.fusion.d
    init_coguidance(params, cfg.d_v, cfg.d_a, cfg.guidance.d, rng)
    init_fusion(params, cfg.fusion, cfg.d_v, cfg.d_a, rng)
    if cfg.use_sup:
        for m in ("a", "v"):
            params.uniform(f"sup.w_{m}", (1, d), d, rng)
            params.zeros(f"sup.b_{m}", (1,))
    init_projection(params, d, rng)
    params.uniform("head.w3", (1, d), d, rng)
    params.zeros("head.b3", (1,))
    params.uniform("head.w4", (d, cfg.num_classes), d, rng)
    params.zeros("head.b4", (cfg.num_classes,))
    return params


def _flatten_visual(visual, cfg: ModelConfig) -> Tensor:
    v = tn.as_tensor(visual)
    if v.ndim >= 4 and v.shape[-2:] == (cfg.H, cfg.W):
        v = v.reshape(*v.shape[:-2], cfg.S)
    return v


def forward(
    params: ModelParams,
    cfg: ModelConfig,
    visual,
    audio,
    labels=None,
    aug_rng: np.random.Generator | None = None,
) -> ModelOutput:
    """Batched forward pass on visual (B, T, d_v, H, W) or (B, T, d_v, S) and audio (B, T, d_a).

    When ``labels`` are given and the contrastive weight is nonzero, the
    per-video contrastive loss is computed with augmentations from ``aug_rng``.
    """
    v = _flatten_visual(visual, cfg)
    a = tn.as_tensor(audio)
    guided = avca_forward(v, a, cfg.guidance, params)
    v_enc, a_enc = encode_modalities(guided.v, guided.a, cfg.fusion, params)
    F_av, maps = fuse(v_enc, a_enc, cfg.fusion, params)

    w_p, b_p = params["contrast.w_p"], params["contrast.b_p"]
    F_FT = project(F_av, w_p, b_p)
    F_o = merge(F_av, F_FT, cfg.contrast.lam) if cfg.contrast.lam != 0 else F_av

    out = ModelOutput(
        event_probs=event_score(F_o, params["head.w3"], params["head.b3"]),
        logits=category_logits(F_av, params["head.w4"], params["head.b4"])[0],
        fused=FusedFeatures(F_av=F_av, F_FT=F_FT, F_o=F_o),
        guided=guided,
        attention=maps,
    )
    if cfg.use_sup:
        out.y_a = event_score(a_enc, params["sup.w_a"], params["sup.b_a"])
        out.y_v = event_score(v_enc, params["sup.w_v"], params["sup.b_v"])
    if labels is not None and cfg.contrast.weight != 0:
        rng = aug_rng if aug_rng is not None else np.random.default_rng(0)
        F_aug = augment_sequence(F_av, cfg.contrast, rng)
        group = tn.concat([F_FT, project(F_aug, w_p, b_p)], axis=-2)
        is_event = np.asarray(labels) >= 0
        out.contrast = supcon_loss_batch(group, is_event, cfg.contrast.tau, cfg.contrast.normalize)
    return out


def compute_loss(out: ModelOutput, cfg: ModelConfig, labels, categories) -> LossBreakdown:
    return total_loss(
        out.event_probs,
        out.logits,
        labels,
        categories,
        y_a=out.y_a,
        y_v=out.y_v,
        contrast=out.contrast,
        contrast_weight=cfg.contrast.weight,
    )


def predict(params: ModelParams, cfg: ModelConfig, visual, audio, theta: float | None = None):
    """Inference without recording a tape. Returns (decisions (B, T), event probs, category probs)."""
    out = forward(params, cfg, visual, audio)
    yc = out.category_probs
    _, decisions = infer(out.event_probs.data, yc, cfg.theta if theta is None else theta)
    return decisions, out.event_probs.data, yc
