"""Command line entry point.

Subcommands: train, eval, ablate, gradcheck, synth.

Exit codes: 0 success, 1 config or input error, 2 numeric failure,
3 acceptance failure (gradient check over tolerance).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .config import ConfigError, RunConfig, load_config, parse_config
from .dataio import FeatureFormatError, dataset_files, generate_synthetic, load_dataset, write_feature_file, write_manifest
from .harness import (
    NumericError,
    SWEEPS,
    ablate,
    evaluate,
    format_table,
    gradcheck_model,
    load_trained,
    prepare_data,
    run_training,
    table_csv,
    threads_from_env,
)
from .tensor import BACKWARD_RULES, NonFiniteError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_ACCEPTANCE = 0, 1, 2, 3


def _overrides(args) -> dict[str, str]:
    ov: dict[str, str] = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        ov[key.strip()] = value.strip()
    if getattr(args, "seed", None) is not None:
        # the synthetic data follows the run seed, as in ablation sweeps
        ov["run.seed"] = ov["data.seed"] = str(args.seed)
    if getattr(args, "epochs", None) is not None:
        ov["optim.epochs"] = str(args.epochs)
    if getattr(args, "theta", None) is not None:
        ov["infer.theta"] = str(args.theta)
    if getattr(args, "out", None) is not None:
        ov["run.out"] = str(args.out)
    if getattr(args, "data", None) is not None:
        ov["data.manifest"] = str(args.data)
    return ov


def _config(args) -> RunConfig:
    ov = _overrides(args)
    if args.config:
        return load_config(args.config, ov)
    return parse_config("", "<defaults>", ov)


def cmd_train(args) -> int:
    cfg = _config(args)
    result = run_training(cfg, Path(cfg.run.out), echo=None if args.quiet else print)
    final = result.last("val") if any(r["split"] == "val" for r in result.records) else result.last("train")
    print(f"finished: {final['split']} segment_accuracy={final['segment_accuracy']:.4f}; outputs in {cfg.run.out}", file=sys.stderr)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config, _overrides(args)) if args.config else None
    if args.data:
        try:
            dataset = load_dataset(args.data)
        except OSError as exc:
            raise ConfigError(f"--data: cannot read {exc.filename}: {exc.strerror}") from None
    else:
        # re-create the data the checkpoint was trained on
        _, meta = load_checkpoint(args.checkpoint)
        stored = cfg or parse_config(meta, f"{args.checkpoint} (embedded config)")
        train_set, val_set = prepare_data(stored)
        dataset = val_set if (val_set and args.split == "val") else train_set
    params, mcfg, _ = load_trained(args.checkpoint, cfg, dataset[0])
    if args.theta_sweep:
        thetas = [float(t) for t in np.round(np.linspace(0.05, 1.0, 20), 2)]
    else:
        thetas = [args.theta if args.theta is not None else mcfg.theta]
    for theta in thetas:
        print(json.dumps({"theta": theta, **evaluate(params, mcfg, dataset, theta=theta)}))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    if args.sweep not in SWEEPS:
        raise ConfigError(f"--sweep: unknown sweep {args.sweep!r}; choose from {', '.join(sorted(SWEEPS))}")
    seeds = [cfg.seed + i for i in range(args.seeds)]
    rows = ablate(cfg, args.sweep, seeds, workers=threads_from_env())
    print(format_table(rows, title=f"sweep: {args.sweep} (segment accuracy over seeds {seeds})"))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"ablate_{args.sweep}.csv").write_text(table_csv(rows))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _config(args) if args.config or args.set else None
    if args.corrupt_backward and args.corrupt_backward not in BACKWARD_RULES:
        raise ConfigError(f"--corrupt-backward: unknown op {args.corrupt_backward!r}; choose from {', '.join(sorted(BACKWARD_RULES))}")
    report, n = gradcheck_model(cfg, corrupt=args.corrupt_backward, seed=args.seed or 0)
    for line in report.lines():
        print(line)
    ok = report.passed(args.tol)
    print(f"{len(report.max_rel_error)} parameters, {n} scalars, max rel. error {report.worst:.3e} -> {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_ACCEPTANCE


def cmd_synth(args) -> int:
    cfg = _config(args)
    out = Path(cfg.run.out)
    out.mkdir(parents=True, exist_ok=True)
    data = generate_synthetic(cfg.data.synthetic_spec())
    paths = dataset_files(out, len(data))
    for p, seq in zip(paths, data):
        write_feature_file(p, seq)
    write_manifest(out / "manifest.txt", paths, comment=f"synthetic, seed={cfg.data.seed}, n={len(data)}")
    print(out / "manifest.txt")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avloc", description="Audio-visual event localization: train, evaluate, ablate.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        p.add_argument("--seed", type=int, help="seed for weights, batching and synthetic data")
        if out:
            p.add_argument("--out", help="output directory")

    p = sub.add_parser("train", help="train a model and write metrics + checkpoint")
    common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--data", help="manifest of feature files (default: synthetic data from the config)")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser(
        "eval",
        help="evaluate a checkpoint",
        description="A segment whose event score equals theta exactly counts as an event (H(0) = 1).",
    )
    p.add_argument("checkpoint")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--data", help="manifest to evaluate (default: the checkpoint's own data)")
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--theta", type=float, help="event threshold; a score equal to theta is an event")
    p.add_argument("--theta-sweep", action="store_true", help="evaluate on a grid of thresholds")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation sweep over seeds")
    common(p)
    p.add_argument("--sweep", required=True, help=f"one of: {', '.join(SWEEPS)}")
    p.add_argument("--seeds", type=int, default=5, help="number of seeds (consecutive from --seed)")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter of a tiny model")
    common(p, out=False)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--corrupt-backward", metavar="OP", help="sabotage one backward rule (negative control), e.g. sigmoid")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write a synthetic dataset as feature files plus a manifest")
    common(p)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FeatureFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, NonFiniteError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
