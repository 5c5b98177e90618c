"""Acceptance checks. Each prints one PASS/FAIL line with the measured numbers.

Run alone with ``pytest tests/test_acceptance.py -s`` or ``python3 tests/test_acceptance.py``.
The learnability and ordering checks train on the standard synthetic
benchmark and take several minutes in total.
"""

import contextlib
import functools
import io
import math
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))
import oracles  # noqa: E402

from avloc.checkpoint import decode_checkpoint, encode_checkpoint  # noqa: E402
from avloc.cli import main  # noqa: E402
from avloc.coguidance import (  # noqa: E402
    GuidanceConfig,
    apply_audio_calibration,
    apply_visual_calibration,
    audio_temporal_self_attention,
    avca_forward,
    channel_calibration,
    init_coguidance,
    visual_query_audio,
)
from avloc.config import load_config  # noqa: E402
from avloc.contrast import ContrastConfig, ContrastGroup, augment_sequence, infonce_loss, merge, project, supcon_loss  # noqa: E402
from avloc.dataio import (  # noqa: E402
    BadMagicError,
    TruncatedFileError,
    VersionMismatchError,
    decode_feature_file,
    encode_feature_file,
    generate_synthetic,
)
from avloc.fusion import FusionConfig, cross_modal_relation_attention, intra_modal_self_attention, temporal_encode  # noqa: E402
from avloc.harness import AblationRow, format_table, gradcheck_model, run_training, train, variant_config  # noqa: E402
from avloc.localization import BACKGROUND, infer  # noqa: E402
from avloc.model import ModelConfig, compute_loss, forward, init_model  # noqa: E402
from avloc.optim import ModelParams  # noqa: E402
from avloc.tensor import Tensor  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]
BENCHMARK = ROOT / "configs" / "benchmark.conf"
SEPARABLE = ROOT / "configs" / "separable.conf"
SMOKE = ROOT / "configs" / "smoke.conf"
ORDERING_SEEDS = range(5)


def report(name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    print(line, flush=True)
    return ok


@functools.lru_cache(maxsize=None)
def benchmark_run(seed, mode):
    cfg = variant_config(load_config(BENCHMARK), {"guidance.mode": mode}, seed)
    start = time.perf_counter()
    result = train(cfg)
    return result, time.perf_counter() - start


# ------------------------------------------------------------------ criteria


def check_gradient_correctness():
    start = time.perf_counter()
    rep, n = gradcheck_model()
    seconds = time.perf_counter() - start
    with contextlib.redirect_stdout(io.StringIO()):
        negative = main(["gradcheck", "--corrupt-backward", "sigmoid"])
    ok = rep.worst < 1e-4 and seconds < 60 and negative == 3
    detail = (
        f"{len(rep.max_rel_error)} parameters / {n} scalars, max rel. error {rep.worst:.2e} (< 1e-4), "
        f"{seconds:.1f} s (< 60 s); corrupted sigmoid backward exits {negative} (nonzero)"
    )
    return report("gradient correctness", ok, detail)


def check_closed_form_losses():
    f = np.tile([0.4, -0.1, 0.3], (20, 1))
    sc = supcon_loss(ContrastGroup(f, np.array([True, False] * 5)), tau=0.5).item()
    errs = {"supcon ln 19": abs(sc - math.log(19))}
    for B in (2, 5, 16):
        g = np.tile([0.2, 0.7], (B, 1))
        errs[f"infonce ln {B}"] = abs(infonce_loss(g, g, 0.1).item() - math.log(B))

    cfg = ModelConfig(d_v=4, d_a=3, H=2, W=1, num_classes=28, guidance=GuidanceConfig(d=4), fusion=FusionConfig(d=4, heads=2), contrast=ContrastConfig())
    params = init_model(cfg, 0)
    for name in ("head.w3", "head.b3", "head.w4", "head.b4", "sup.w_a", "sup.b_a", "sup.w_v", "sup.b_v"):
        params[name].data[...] = 0.0
    rng = np.random.default_rng(1)
    visual, audio = rng.standard_normal((1, 10, 4, 2, 1)), rng.standard_normal((1, 10, 3))
    labels, cats = np.array([[5, 5, 5, 5, -1, -1, -1, -1, -1, -1]]), np.array([5])
    out = forward(params, cfg, visual, audio, labels=labels, aug_rng=np.random.default_rng(2))
    parts = compute_loss(out, cfg, labels, cats)
    aug = augment_sequence(out.fused.F_av, cfg.contrast, np.random.default_rng(2))
    group = np.concatenate([out.fused.F_FT.data[0], project(aug, params["contrast.w_p"], params["contrast.b_p"]).data[0]])
    l_con = oracles.supcon(group.tolist(), (labels[0] >= 0).tolist(), cfg.contrast.tau)
    expected = math.log(28) + 2 * math.log(2) + cfg.contrast.weight * l_con
    errs["uniform total"] = abs(parts.total.item() - expected)
    errs["uniform components"] = max(
        abs(parts.category.item() - math.log(28)), abs(parts.event.item() - math.log(2)), abs(parts.sup.item() - math.log(2))
    )
    ok = max(errs.values()) < 1e-9
    return report("closed-form loss values", ok, ", ".join(f"{k} err {v:.1e}" for k, v in errs.items()) + " (< 1e-9)")


def check_identity_cases():
    rng = np.random.default_rng(0)
    errs = {}
    x = rng.standard_normal((5, 4))
    errs["beta=0"] = np.abs(apply_visual_calibration(Tensor(x), Tensor(rng.standard_normal((5, 4))), 0.0).data - x).max()
    errs["psi=0"] = np.abs(apply_audio_calibration(Tensor(x), Tensor(rng.standard_normal((5, 4))), 0.0).data - x).max()
    errs["lambda=0"] = np.abs(merge(Tensor(x), Tensor(rng.standard_normal((5, 4))), 0.0).data - x).max()
    errs["temporal none"] = np.abs(temporal_encode(Tensor(x), "none").data - x).max()

    params = ModelParams()
    for blk in ("self", "cross"):
        for n in ("wq", "wk", "wv", "wo"):
            params.add(f"{blk}.{n}", rng.standard_normal((4, 4)))
        params[f"{blk}.wv"].data[...] = 0.0
    a, v = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
    out_self, _ = intra_modal_self_attention(Tensor(x), params, "self", heads=2)
    out_cross, _ = cross_modal_relation_attention(Tensor(x), Tensor(a), Tensor(v), params, "cross", heads=2)
    errs["zero value projections"] = max(np.abs(out_self.data - x).max(), np.abs(out_cross.data - x).max())

    cg = ModelParams()
    init_coguidance(cg, 4, 3, 5, rng)
    vis, aud = rng.standard_normal((3, 4, 6)), rng.standard_normal((3, 3))
    none = avca_forward(vis, aud, GuidanceConfig(mode="none", d=5), cg)
    full0 = avca_forward(vis, aud, GuidanceConfig(mode="full", beta=0.0, psi=0.0, d=5), cg)
    errs["guidance none / zero strengths"] = max(
        np.abs(none.v.data - vis.mean(axis=-1)).max(),
        np.abs(none.a.data - aud).max(),
        np.abs(full0.v.data - full0.intermediates["v_cs"].data).max(),
        np.abs(full0.a.data - aud).max(),
    )
    ok = max(errs.values()) < 1e-12
    return report("identity cases", ok, ", ".join(f"{k} {v:.0e}" for k, v in errs.items()) + " (< 1e-12)")


def check_oracle_equivalence():
    worst = {"channel calibration": 0.0, "audio self-attention": 0.0, "visual-query audio": 0.0, "contrastive": 0.0, "infonce": 0.0, "composed co-guidance": 0.0}
    for seed in range(20):
        rng = np.random.default_rng(seed)
        v_g, w1, w2, u = rng.standard_normal((3, 4)), rng.standard_normal((2, 3)), rng.standard_normal((2, 3)), rng.standard_normal((1, 2))
        out, _ = channel_calibration(Tensor(v_g), Tensor(w1), Tensor(w2), Tensor(u))
        ref = oracles.channel_calibration(v_g.tolist(), w1.tolist(), w2.tolist(), u.tolist())
        worst["channel calibration"] = max(worst["channel calibration"], np.abs(out.data - ref).max())

        a, ws = rng.standard_normal((5, 3)), [rng.standard_normal((3, 3)) for _ in range(3)]
        out, _ = audio_temporal_self_attention(Tensor(a), *map(Tensor, ws))
        ref = oracles.audio_self_attention(a.tolist(), *(w.tolist() for w in ws))
        worst["audio self-attention"] = max(worst["audio self-attention"], np.abs(out.data - ref).max())

        v_gp, wq = rng.standard_normal((5, 4)), rng.standard_normal((4, 3))
        out, _ = visual_query_audio(Tensor(v_gp), Tensor(a), Tensor(wq), Tensor(ws[1]), Tensor(ws[2]))
        ref = oracles.visual_query_audio(v_gp.tolist(), a.tolist(), wq.tolist(), ws[1].tolist(), ws[2].tolist())
        worst["visual-query audio"] = max(worst["visual-query audio"], np.abs(out.data - ref).max())

        f, lab = rng.standard_normal((6, 4)), rng.random(3) < 0.5
        got = supcon_loss(ContrastGroup(f, lab), 0.5).item()
        worst["contrastive"] = max(worst["contrastive"], abs(got - oracles.supcon(f.tolist(), lab.tolist(), 0.5)))

        fv, fa = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
        got = infonce_loss(fv, fa, 0.5).item()
        worst["infonce"] = max(worst["infonce"], abs(got - oracles.infonce(fv.tolist(), fa.tolist(), 0.5)))

        cg = ModelParams()
        init_coguidance(cg, 4, 3, 5, np.random.default_rng(seed))
        vis, aud = rng.standard_normal((3, 4, 3)), rng.standard_normal((3, 3))
        cfg = GuidanceConfig(d=5)
        res = avca_forward(vis, aud, cfg, cg)
        weights = {k[len("avca."):]: cg[k].data.tolist() for k in cg}
        rv, ra = oracles.avca_full(vis.tolist(), aud.tolist(), weights, cfg.beta, cfg.psi)
        worst["composed co-guidance"] = max(worst["composed co-guidance"], np.abs(res.v.data - rv).max(), np.abs(res.a.data - ra).max())
    ok = max(worst.values()) < 1e-12
    return report("brute-force oracle equivalence (20 seeds each)", ok, ", ".join(f"{k} {v:.0e}" for k, v in worst.items()) + " (< 1e-12)")


def check_inference_rule():
    scores = np.arange(100) / 99.0
    thetas = np.arange(1, 10) / 10.0
    yc = np.array([0.15, 0.05, 0.6, 0.2])
    mismatches = 0
    for theta in thetas:
        outputs, decisions = infer(scores, yc, theta)
        for t, s in enumerate(scores):
            heaviside = 1.0 if s - theta >= 0 else 0.0
            want_out = [heaviside * c for c in yc]
            want_dec = max(range(len(yc)), key=lambda c: yc[c]) if heaviside else BACKGROUND
            mismatches += outputs[t].tolist() != want_out or decisions[t] != want_dec
    return report("inference rule", mismatches == 0, f"{len(scores)}x{len(thetas)} grid, {mismatches} disagreements (need 0)")


def check_learnability():
    result, seconds = benchmark_run(0, "full")
    val = result.last("val")["segment_accuracy"]
    epochs = result.last("val")["epoch"]
    start = time.perf_counter()
    sep = train(load_config(SEPARABLE))
    sep_seconds = time.perf_counter() - start
    train_acc = [r["segment_accuracy"] for r in sep.records if r["split"] == "train"]
    first_perfect = next((i + 1 for i, a in enumerate(train_acc) if a == 1.0), None)
    ok = val >= 0.90 and epochs <= 50 and seconds < 300 and first_perfect is not None and first_perfect <= 30
    detail = (
        f"benchmark held-out accuracy {val:.3f} after {epochs} epochs (>= 0.90) in {seconds:.0f} s (< 300 s); "
        f"noise-free data reaches train accuracy 1.0 at epoch {first_perfect} (<= 30) in {sep_seconds:.0f} s"
    )
    return report("learnability", ok, detail)


def check_guidance_ordering():
    rows = []
    for mode in ("none", "visual_only", "audio_only", "full"):
        accs = [benchmark_run(s, mode)[0].last("val")["segment_accuracy"] for s in ORDERING_SEEDS]
        rows.append(AblationRow(mode, accs))
    print(format_table(rows, f"guidance mode, held-out segment accuracy over seeds {list(ORDERING_SEEDS)}"), flush=True)
    full, none = rows[-1], rows[0]
    ok = full.mean > none.mean
    return report("guidance ordering", ok, f"full {100 * full.mean:.2f}% > none {100 * none.mean:.2f}% over {len(full.accuracies)} seeds")


def check_determinism_and_formats():
    problems = []
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        for name in ("a", "b"):
            run_training(load_config(SMOKE), tmp / name)
        for f in ("metrics.jsonl", "checkpoint.ckpt"):
            if (tmp / "a" / f).read_bytes() != (tmp / "b" / f).read_bytes():
                problems.append(f"{f} differs between identical runs")
        ckpt = (tmp / "a" / "checkpoint.ckpt").read_bytes()
        if encode_checkpoint(*decode_checkpoint(ckpt)) != ckpt:
            problems.append("checkpoint round trip")
    seq = generate_synthetic(load_config(SMOKE).data.synthetic_spec())[0]
    buf = encode_feature_file(seq)
    if encode_feature_file(decode_feature_file(buf)) != buf:
        problems.append("feature file round trip")
    bad = {
        BadMagicError: b"XXXXXXXX" + buf[8:],
        VersionMismatchError: buf[:8] + b"\x07\x00" + buf[10:],
        TruncatedFileError: buf[:-5],
    }
    for err, blob in bad.items():
        try:
            decode_feature_file(blob)
            problems.append(f"{err.__name__} not raised")
        except err:
            pass
    for err, blob in {BadMagicError: b"CACEFEAT" + ckpt[8:], TruncatedFileError: ckpt[:-8]}.items():
        try:
            decode_checkpoint(blob)
            problems.append(f"checkpoint {err.__name__} not raised")
        except err:
            pass
    detail = "metrics and checkpoint byte-identical across runs; round trips byte-identical; malformed inputs rejected"
    return report("determinism and formats", not problems, "; ".join(problems) or detail)


def check_schedule():
    result, _ = benchmark_run(0, "full")
    expected = [7e-4 * 0.5 ** sum(e >= m for m in (10, 20, 30)) for e in range(1, 51)]
    ok = result.lr_trace == expected and result.lr_trace[8] == 7e-4 and result.lr_trace[9] == 3.5e-4
    recorded = [r["lr"] for r in result.records if r["split"] == "train"]
    ok = ok and recorded == result.lr_trace
    detail = f"epochs 9/10/20/30 -> {result.lr_trace[8]:g}, {result.lr_trace[9]:g}, {result.lr_trace[19]:g}, {result.lr_trace[29]:g}"
    return report("training schedule", ok, detail)


CHECKS = [
    check_gradient_correctness,
    check_closed_form_losses,
    check_identity_cases,
    check_oracle_equivalence,
    check_inference_rule,
    check_learnability,
    check_guidance_ordering,
    check_determinism_and_formats,
    check_schedule,
]


@pytest.mark.slow
@pytest.mark.parametrize("check", CHECKS, ids=lambda c: c.__name__.removeprefix("check_"))
def test_acceptance(check, capsys):
    with capsys.disabled():
        print()
        ok = check()
    assert ok


if __name__ == "__main__":
    results = [check() for check in CHECKS]
    print(f"{sum(results)}/{len(results)} criteria pass")
    sys.exit(0 if all(results) else 3)
