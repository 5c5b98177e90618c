"""Training, evaluation, ablation and gradient-check drivers behind the CLI."""

from __future__ import annotations

import concurrent.futures
import json
import os
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, parse_config
from .dataio import FeatureSequence, collate, generate_synthetic, load_dataset, make_batches, split_dataset
from .gradcheck import GradCheckReport, grad_check
from .localization import BACKGROUND, confusion_counts, infer, segment_accuracy
from .model import ModelConfig, compute_loss, forward, init_model
from .optim import ModelParams, adam_step, lr_at_epoch
from .tensor import NonFiniteError, Tape

__all__ = [
    "NumericError",
    "TrainResult",
    "prepare_data",
    "model_config_for",
    "train",
    "evaluate",
    "SWEEPS",
    "AblationRow",
    "ablate",
    "format_table",
    "gradcheck_model",
    "load_trained",
]


class NumericError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class TrainResult:
    params: ModelParams
    model_cfg: ModelConfig
    records: list[dict] = field(default_factory=list)
    lr_trace: list[float] = field(default_factory=list)

    def last(self, split: str) -> dict:
        return [r for r in self.records if r["split"] == split][-1]


def prepare_data(cfg: RunConfig) -> tuple[list[FeatureSequence], list[FeatureSequence]]:
    """(train, validation) datasets from a manifest or the synthetic generator."""
    d = cfg.data
    if d.manifest:
        try:
            data = load_dataset(d.manifest)
        except OSError as exc:
            raise ConfigError(f"data.manifest: cannot read {exc.filename}: {exc.strerror}") from None
        if not data:
            raise ConfigError(f"data.manifest: {d.manifest} lists no feature files")
        if d.val_manifest:
            return data, load_dataset(d.val_manifest)
    else:
        data = generate_synthetic(d.synthetic_spec())
    if d.val_fraction > 0:
        return split_dataset(data, d.val_fraction, d.seed)
    return data, []


def model_config_for(cfg: RunConfig, sample: FeatureSequence) -> ModelConfig:
    _, d_v, H, W = sample.visual.shape
    return cfg.model_config(d_v=d_v, d_a=sample.audio.shape[1], H=H, W=W, C=sample.num_classes)


def evaluate(params: ModelParams, mcfg: ModelConfig, dataset: Sequence[FeatureSequence], theta: float | None = None, batch_size: int = 256) -> dict:
    """Segment accuracy, confusion counts and losses on ``dataset`` (no tape)."""
    theta = mcfg.theta if theta is None else theta
    preds, labels = [], []
    sums: dict[str, float] = {}
    n = len(dataset)
    for lo in range(0, n, batch_size):
        b = collate(dataset, np.arange(lo, min(n, lo + batch_size)))
        out = forward(params, mcfg, b.visual, b.audio, labels=b.labels, aug_rng=np.random.default_rng(lo))
        for k, v in compute_loss(out, mcfg, b.labels, b.categories).values().items():
            sums[k] = sums.get(k, 0.0) + v * len(b)
        _, dec = infer(out.event_probs.data, out.category_probs, theta)
        preds.append(dec)
        labels.append(b.labels)
    p, y = np.concatenate(preds), np.concatenate(labels)
    result = {
        "segment_accuracy": segment_accuracy(p, y),
        "confusion": confusion_counts(p, y),
        "background_predictions": int(np.sum(p == BACKGROUND)),
    }
    result.update({k: v / n for k, v in sums.items()})
    return result


def _record(epoch: int, split: str, lr: float | None, metrics: dict, started: float | None) -> dict:
    rec = {"epoch": epoch, "split": split}
    if lr is not None:
        rec["lr"] = lr
    rec["segment_accuracy"] = metrics["segment_accuracy"]
    for k in ("loss", "loss_category", "loss_event", "loss_sup", "loss_contrast"):
        rec[k] = metrics[k]
    if started is not None:
        rec["wall_time"] = round(time.perf_counter() - started, 3)
    return rec


def train(
    cfg: RunConfig,
    data: tuple[list[FeatureSequence], list[FeatureSequence]] | None = None,
    emit: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Adam on the composite loss with the step learning-rate schedule and clipping.

    ``emit`` receives each per-epoch metrics record as it is produced.
    """
    cfg.validate()
    train_set, val_set = data if data is not None else prepare_data(cfg)
    if not train_set:
        raise ConfigError("data: training set is empty")
    mcfg = model_config_for(cfg, train_set[0])
    params = init_model(mcfg, cfg.seed)
    opt = cfg.optim
    started = time.perf_counter() if cfg.run.record_time else None
    result = TrainResult(params=params, model_cfg=mcfg)
    aug_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(7,)))
    names = params.names()
    tensors = params.tensors()

    for epoch in range(1, opt.epochs + 1):
        lr = lr_at_epoch(epoch, opt.lr, opt.milestones, opt.gamma)
        result.lr_trace.append(lr)
        for step, batch in enumerate(make_batches(train_set, opt.batch_size, cfg.seed, epoch)):
            # overflow surfaces below as a non-finite loss or gradient, with context
            with Tape() as tape, np.errstate(over="ignore", invalid="ignore"):
                out = forward(params, mcfg, batch.visual, batch.audio, labels=batch.labels, aug_rng=aug_rng)
                try:
                    losses = compute_loss(out, mcfg, batch.labels, batch.categories)
                except NonFiniteError as exc:
                    raise NumericError(f"epoch {epoch} step {step}: {exc}") from None
            grads = dict(zip(names, tape.gradient(losses.total, tensors)))
            try:
                adam_step(params, grads, lr, opt.beta1, opt.beta2, opt.eps, opt.clip_norm or None)
            except NonFiniteError as exc:
                raise NumericError(f"epoch {epoch} step {step}: {exc}") from None

        recs = [_record(epoch, "train", lr, evaluate(params, mcfg, train_set), started)]
        if val_set:
            recs.append(_record(epoch, "val", None, evaluate(params, mcfg, val_set), started))
        for rec in recs:
            result.records.append(rec)
            if emit is not None:
                emit(rec)
    return result


def metrics_line(rec: dict) -> str:
    return json.dumps(rec, sort_keys=False, separators=(", ", ": "))


def run_training(cfg: RunConfig, out_dir: Path | None = None, echo: Callable[[str], None] | None = None) -> TrainResult:
    """Train and write ``metrics.jsonl``, ``checkpoint.ckpt`` and ``config.txt`` to ``out_dir``."""
    out_dir = Path(out_dir or cfg.run.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "metrics.jsonl", "w") as fh:

        def emit(rec):
            line = metrics_line(rec)
            fh.write(line + "\n")
            fh.flush()
            if echo:
                echo(line)

        result = train(cfg, emit=emit)
    (out_dir / "config.txt").write_text(cfg.to_text())
    save_checkpoint(out_dir / "checkpoint.ckpt", result.params.state_dict(), cfg.to_text())
    return result


def load_trained(path, cfg: RunConfig | None = None, sample: FeatureSequence | None = None) -> tuple[ModelParams, ModelConfig, RunConfig]:
    """Rebuild a model from a checkpoint; ``cfg`` defaults to the config stored inside it."""
    tensors, meta = load_checkpoint(path)
    cfg = cfg or parse_config(meta, f"{path} (embedded config)")
    mcfg = model_config_for(cfg, sample) if sample is not None else cfg.model_config()
    params = init_model(mcfg, cfg.seed)
    try:
        params.load_state_dict(tensors)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"checkpoint {path} does not match the config: {exc}") from None
    return params, mcfg, cfg


# -------------------------------------------------------------------- ablate

SWEEPS: dict[str, list[tuple[str, dict[str, str]]]] = {
    "guidance_mode": [
        ("none", {"guidance.mode": "none"}),
        ("visual_only", {"guidance.mode": "visual_only"}),
        ("audio_only", {"guidance.mode": "audio_only"}),
        ("full", {"guidance.mode": "full"}),
    ],
    "lambda": [(f"lambda={x}", {"contrast.lam": x}) for x in ("0", "0.2", "0.4", "0.6", "0.8")],
    "psi": [(f"psi={x}", {"guidance.psi": x}) for x in ("0", "0.15", "0.3", "0.45")],
    "temporal_mode": [
        ("none", {"fusion.temporal_mode": "none"}),
        ("unidirectional_recurrent", {"fusion.temporal_mode": "unidirectional_recurrent"}),
        ("bidirectional_recurrent", {"fusion.temporal_mode": "bidirectional_recurrent"}),
    ],
    "augmentation": [
        ("channel_mask", {"contrast.augmentation": "channel_mask"}),
        ("mixup", {"contrast.augmentation": "mixup"}),
        ("gaussian sigma=1.0", {"contrast.augmentation": "gaussian", "contrast.sigma": "1.0"}),
        ("gaussian sigma=0.1", {"contrast.augmentation": "gaussian", "contrast.sigma": "0.1"}),
        ("gaussian sigma=0.05", {"contrast.augmentation": "gaussian", "contrast.sigma": "0.05"}),
    ],
    "loss_weight": [(f"weight={x}", {"contrast.weight": x}) for x in ("0", "0.5", "1.0", "3.0", "5.0")],
}


@dataclass
class AblationRow:
    label: str
    accuracies: list[float]

    @property
    def mean(self) -> float:
        return statistics.fmean(self.accuracies)

    @property
    def sd(self) -> float:
        return statistics.stdev(self.accuracies) if len(self.accuracies) > 1 else 0.0


def variant_config(cfg: RunConfig, overrides: dict[str, str], seed: int) -> RunConfig:
    c = cfg.copy()
    for k, v in overrides.items():
        c.set(k, v)
    c.run.seed = seed
    c.data.seed = seed
    c.validate()
    return c


def _variant_accuracy(cfg_text: str) -> float:
    cfg = parse_config(cfg_text)
    result = train(cfg)
    split = "val" if cfg.data.val_fraction > 0 or cfg.data.val_manifest else "train"
    return result.last(split)["segment_accuracy"]


def ablate(cfg: RunConfig, sweep: str, seeds: Sequence[int], workers: int = 1) -> list[AblationRow]:
    """Train every variant of ``sweep`` on every seed; the data seed follows the run seed."""
    if sweep not in SWEEPS:
        raise ConfigError(f"unknown sweep {sweep!r}; choose from {sorted(SWEEPS)}")
    jobs = [(label, variant_config(cfg, ov, s).to_text()) for label, ov in SWEEPS[sweep] for s in seeds]
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            accs = list(pool.map(_variant_accuracy, [text for _, text in jobs]))
    else:
        accs = [_variant_accuracy(text) for _, text in jobs]
    rows: dict[str, AblationRow] = {}
    for (label, _), acc in zip(jobs, accs):
        rows.setdefault(label, AblationRow(label, [])).accuracies.append(acc)
    return list(rows.values())


def format_table(rows: Sequence[AblationRow], title: str = "") -> str:
    width = max([len("variant")] + [len(r.label) for r in rows])
    lines = [title] if title else []
    lines.append(f"{'variant':<{width}}  {'accuracy (%)':>18}  seeds")
    for r in rows:
        cell = f"{100 * r.mean:6.2f} +/- {100 * r.sd:5.2f}"
        lines.append(f"{r.label:<{width}}  {cell:>18}  {len(r.accuracies)}")
    return "\n".join(lines)


def table_csv(rows: Sequence[AblationRow]) -> str:
    out = ["variant,mean,sd," + ",".join(f"seed{i}" for i in range(len(rows[0].accuracies)))]
    for r in rows:
        out.append(",".join([r.label, repr(r.mean), repr(r.sd)] + [repr(a) for a in r.accuracies]))
    return "\n".join(out) + "\n"


# ----------------------------------------------------------------- gradcheck

TINY = dict(T=3, d_v=6, H=2, W=2, d_a=5, d=8, C=4, heads=2)


def gradcheck_model(cfg: RunConfig | None = None, corrupt: str | None = None, seed: int = 0) -> tuple[GradCheckReport, int]:
    """Finite-difference check of the whole model on one tiny synthetic video.

    ``corrupt`` names a backward rule to sabotage (negative control). Returns the
    report and the number of scalar parameters checked.
    """
    base = cfg.copy() if cfg is not None else RunConfig()
    t = TINY
    mcfg = base.model_config(d_v=t["d_v"], d_a=t["d_a"], H=t["H"], W=t["W"], C=t["C"])
    mcfg.guidance.d = t["d"]
    mcfg.fusion.d = t["d"]
    mcfg.fusion.heads = t["heads"]
    params = init_model(mcfg, seed)
    rng = np.random.default_rng(seed + 1)
    visual = rng.standard_normal((1, t["T"], t["d_v"], t["H"], t["W"]))
    audio = rng.standard_normal((1, t["T"], t["d_a"]))
    labels = np.array([[1, 1, -1]])
    categories = np.array([1])

    def loss():
        out = forward(params, mcfg, visual, audio, labels=labels, aug_rng=np.random.default_rng(seed + 2))
        return compute_loss(out, mcfg, labels, categories).total

    if corrupt:
        with tn.corrupted_backward(corrupt):
            report = grad_check(loss, params)
    else:
        report = grad_check(loss, params)
    return report, params.num_scalars()


def threads_from_env() -> int:
    raw = os.environ.get("CACE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"CACE_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"CACE_THREADS must be >= 1, got {n}")
    return n
