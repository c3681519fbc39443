"""Command-line entry point: ``dspoint <command> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checks import benchmark, end_to_end_grad_check, size_config
from .config import RunConfig, dump_run_config, load_run_config
from .data import SYNTH_CLASSES, load_dataset, load_xyz, normalize_coords, sample_first_k, synth_dataset, write_dataset
from .fusion import PLACEMENTS
from .model import CheckpointError, ConfigError, load_checkpoint, save_checkpoint
from .train import evaluate, predict_logits, softmax_probs, train_loop

logger = logging.getLogger("dspoint")


def _cmd_gen_data(args) -> int:
    train, test = synth_dataset(args.seed, args.per_class, args.points)
    out = Path(args.out)
    try:
        write_dataset(out, train, test)
    except OSError as exc:
        print(f"error: cannot write dataset to {out}: {exc}", file=sys.stderr)
        return 2
    manifest = {"classes": list(SYNTH_CLASSES), "seed": args.seed, "per_class": args.per_class,
                "points": args.points, "train": len(train), "test": len(test)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(json.dumps(manifest, indent=2))
    return 0


def _resolve_run_config(args) -> RunConfig:
    cfg = load_run_config(args.config)
    model = cfg.model
    overrides = {}
    if args.hf_local:
        overrides["hf_local"] = args.hf_local
    if args.hf_global:
        overrides["hf_global"] = args.hf_global
    if overrides:
        model = dataclasses.replace(model, **overrides)
    train = cfg.train if args.epochs is None else dataclasses.replace(cfg.train, epochs=args.epochs)
    data = cfg.data if args.data is None else dataclasses.replace(cfg.data, root=args.data)
    out = args.out or cfg.output_dir
    return dataclasses.replace(cfg, model=model, train=train, data=data, output_dir=out)


def _cmd_train(args) -> int:
    try:
        cfg = _resolve_run_config(args)
        if not Path(cfg.data.root).is_dir():
            raise ConfigError([f"data.root: dataset directory {cfg.data.root!r} does not exist"])
        train = load_dataset(cfg.data.root, cfg.data.train_split)
        test = load_dataset(cfg.data.root, cfg.data.test_split, train.class_names)
        if not len(train) or not len(test):
            raise ConfigError([f"data.root: no items found for splits "
                               f"{cfg.data.train_split!r}/{cfg.data.test_split!r}"])
        if cfg.infer_num_classes:
            cfg = dataclasses.replace(cfg, model=dataclasses.replace(
                cfg.model, num_classes=len(train.class_names)))
        cfg.validate()
    except ConfigError as exc:
        print("error: invalid configuration:", file=sys.stderr)
        for problem in exc.problems:
            print(f"  - {problem}", file=sys.stderr)
        return 2
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_run_config(cfg, out / "config.json")
    result = train_loop(train, test, cfg.model, cfg.train, log_path=out / "metrics.jsonl")
    save_checkpoint(out / "best.ckpt", result.model,
                    {"class_names": train.class_names, "best_epoch": result.best_epoch,
                     "eval_acc": result.best_accuracy})
    print(f"best eval accuracy: {result.best_accuracy} (epoch {result.best_epoch})")
    print(f"checkpoint: {out / 'best.ckpt'}")
    return 0


def _load(path):
    try:
        return load_checkpoint(path)
    except (OSError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return None, None


def _cmd_eval(args) -> int:
    model, meta = _load(args.checkpoint)
    if model is None:
        return 2
    names = meta.get("class_names")
    ds = load_dataset(args.data, args.split, names)
    if len(ds.class_names) != model.config.num_classes:
        print(f"error: dataset has {len(ds.class_names)} classes, checkpoint expects "
              f"{model.config.num_classes}", file=sys.stderr)
        return 2
    result = evaluate(ds, model)
    print(result.format(ds.class_names))
    return 0


def _cmd_infer(args) -> int:
    model, meta = _load(args.checkpoint)
    if model is None:
        return 2
    pc = load_xyz(args.input)
    coords = normalize_coords(sample_first_k(pc, model.config.n_points).coords)
    probs = softmax_probs(predict_logits(model, coords[None]))[0]
    names = meta.get("class_names") or [str(i) for i in range(len(probs))]
    for i in np.argsort(-probs, kind="stable")[: args.top_k]:
        print(f"{names[i]}\t{probs[i]:.6f}")
    return 0


def _cmd_grad_check(args) -> int:
    report = end_to_end_grad_check(size_config(args.size), n_samples=args.samples, seed=args.seed,
                                   tolerance=args.tolerance)
    print(report.summary())
    print(f"max relative error: {report.max_rel_error:.3e}")
    return 0 if report.passed else 1


def _cmd_bench(args) -> int:
    cfg = load_run_config(args.config).model
    cfg = dataclasses.replace(cfg, n_points=args.n_points, dtype=args.dtype)
    stats = benchmark(cfg, args.repeat)
    print(f"n_points: {stats['n_points']}")
    print(f"latency_ms: {stats['mean_ms']:.2f} +- {stats['std_ms']:.2f} (repeat {stats['repeat']})")
    print(f"params: {stats['params']}")
    return 0


def _cmd_ablate(args) -> int:
    base = load_run_config(args.config)
    train = load_dataset(args.data, base.data.train_split)
    test = load_dataset(args.data, base.data.test_split, train.class_names)
    rows = []
    for local in PLACEMENTS:
        for glob in PLACEMENTS:
            model = dataclasses.replace(base.model, hf_local=local, hf_global=glob,
                                        num_classes=len(train.class_names))
            tcfg = dataclasses.replace(base.train, epochs=args.epochs)
            result = train_loop(train, test, model, tcfg)
            losses = [r["train_loss"] for r in result.log]
            rows.append((local, glob, losses[-1] if losses else float("nan"), result.best_accuracy))
            print(f"local={local:<5} global={glob:<5} final_loss={rows[-1][2]:.4f} "
                  f"best_acc={rows[-1][3]}", flush=True)
    return 0 if all(np.isfinite(r[2]) for r in rows) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dspoint", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic 5-class dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--points", type=int, default=1024)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train and keep the best-evaluating checkpoint")
    p.add_argument("--config")
    p.add_argument("--hf-local", choices=PLACEMENTS)
    p.add_argument("--hf-global", choices=PLACEMENTS)
    p.add_argument("--data", help="override data.root")
    p.add_argument("--out", help="override output_dir")
    p.add_argument("--epochs", type=int, help="override train.epochs")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="accuracy and confusion matrix on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("infer", help="class probabilities for one .xyz file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--top-k", type=int, default=5)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("grad-check", help="end-to-end finite-difference gradient check")
    p.add_argument("--size", default="tiny", choices=["tiny", "small"])
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.set_defaults(func=_cmd_grad_check)

    p = sub.add_parser("bench", help="forward latency and parameter count")
    p.add_argument("--config")
    p.add_argument("--n-points", type=int, default=1024)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--dtype", default="float32", choices=["float32", "float64"])
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("ablate", help="train every front/back/none placement pair briefly")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=3)
    p.set_defaults(func=_cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
