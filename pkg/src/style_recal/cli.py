"""Command-line entry point.

Subcommands: train, eval, prune, analyze, complexity, gradcheck, synth.
Configuration comes from JSON files with flags overriding file values; every
run writes its fully resolved configuration (a manifest) next to its outputs.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import capture_record, prune_eval, correlation_matrix, save_record, sum_squared_corr, top_activated, top_overlap
from .complexity import analyze as complexity_analyze, format_table
from .data import (
    DataError,
    Dataset,
    SynthStyleSpec,
    load_cifar10,
    load_dataset,
    resolve_data_path,
    save_dataset,
    synth_style,
)
from .gradcheck import SUITE_TOLERANCE, run_suite
from .models import ArchitectureConfig, build_resnet, named_config, parse_recalib
from .tensor import set_default_dtype
from .train import TrainConfig, config_hash, evaluate, load_checkpoint, train

__all__ = ["main", "entry"]


class UsageError(Exception):
    """Bad invocation: unknown name, malformed config, missing input."""


def _load_arch(arch: str, recalib: str | None) -> ArchitectureConfig:
    path = Path(arch)
    if path.exists():
        try:
            cfg = ArchitectureConfig.from_json(path.read_text())
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise UsageError(f"malformed architecture config {arch}: {exc}") from exc
    else:
        try:
            cfg = named_config(arch)
        except ValueError as exc:
            raise UsageError(f"--arch {arch!r} is neither a file nor a known preset: {exc}") from exc
    if recalib is not None:
        try:
            cfg.recalib = parse_recalib(recalib)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    return cfg


def _load_data(path_flag: str | None, split: str) -> Dataset:
    try:
        path = Path(resolve_data_path(path_flag))
    except DataError as exc:
        raise UsageError(str(exc)) from exc
    if path.is_dir():
        return load_cifar10(path, split=split)
    if not path.exists():
        raise UsageError(f"dataset path {path} does not exist")
    return load_dataset(path)


def _set_precision(name: str) -> None:
    set_default_dtype(np.float32 if name == "f32" else np.float64)


def _set_threads(n: int | None) -> None:
    if n is None:
        return
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(n)
    except ImportError:  # best effort; numpy may already be pinned via env vars
        pass


def _write_manifest(out: Path, command: str, resolved: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"command": command, "version": __version__, "resolved_config": resolved}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _cmd_train(args) -> int:
    arch = _load_arch(args.arch, args.recalib)
    dataset = _load_data(args.data, "train")
    test_set = None
    if args.eval_every:
        test_path = args.test_data or args.data
        test_set = _load_data(test_path, "test")
    schedule = None
    if args.schedule:
        schedule = [(int(s.split(":")[0]), float(s.split(":")[1])) for s in args.schedule.split(",")]
    steps = args.steps
    if steps is None and args.epochs is not None:
        steps = args.epochs * (len(dataset) // args.batch)
    if steps is None:
        raise UsageError("train: pass --steps or --epochs")
    cfg = TrainConfig(
        steps=steps,
        batch_size=args.batch,
        lr=args.lr,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        schedule=schedule,
        seed=args.seed,
        augment_policy=args.augment,
        log_every=args.log_every,
        eval_every=args.eval_every,
    )
    out = Path(args.out)
    _write_manifest(out, "train", {"arch": arch.to_dict(), "train": cfg.to_dict(), "seed": args.seed,
                                   "config_hash": config_hash(arch.to_dict(), cfg.trajectory_dict())})
    model = build_resnet(arch, seed=args.seed)
    result = train(model, dataset, cfg, out_dir=out, eval_dataset=test_set,
                   resume_from=args.resume)
    if result.diverged:
        print(f"diverged at step {result.final_step}; last good checkpoint kept", file=sys.stderr)
        return 1
    final = result.rows[-1] if result.rows else {}
    print(json.dumps({"final_step": result.final_step, **final}))
    return 0


def _restore_model(args):
    arch = _load_arch(args.arch, args.recalib)
    model = build_resnet(arch, seed=getattr(args, "seed", 0))
    if args.ckpt:
        if not Path(args.ckpt).exists():
            raise UsageError(f"checkpoint {args.ckpt} does not exist")
        load_checkpoint(args.ckpt, model)
    model.eval()
    return model


def _cmd_eval(args) -> int:
    model = _restore_model(args)
    dataset = _load_data(args.data, args.split)
    if args.fold_bn:
        model.fold_bn()
    acc = evaluate(model, dataset, batch_size=args.batch)
    payload = {"top1": acc, "examples": len(dataset), "split": args.split}
    print(json.dumps(payload))
    if args.out:
        out = Path(args.out)
        _write_manifest(out, "eval", {"arch": model.config.to_dict(), "ckpt": args.ckpt})
        (out / "eval.json").write_text(json.dumps(payload, indent=2))
    return 0


def _cmd_prune(args) -> int:
    model = _restore_model(args)
    dataset = _load_data(args.data, args.split)
    ratios = [float(r) for r in args.ratios.split(",")]
    rows = [(r, prune_eval(model, dataset, args.stage, r, batch_size=args.batch)) for r in ratios]
    out = Path(args.out)
    _write_manifest(out, "prune", {"arch": model.config.to_dict(), "ckpt": args.ckpt,
                                   "stage": args.stage, "ratios": ratios})
    with open(out / "prune.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["ratio", "top1"])
        for r, acc in rows:
            writer.writerow([repr(r), repr(acc)])
    print(json.dumps({"stage": args.stage, "rows": rows}))
    return 0


def _cmd_analyze(args) -> int:
    model = _restore_model(args)
    dataset = _load_data(args.data, args.split)
    if args.fold_bn:
        model.fold_bn()
    record = capture_record(model, dataset, batch_size=args.batch)
    out = Path(args.out)
    _write_manifest(out, "analyze", {"arch": model.config.to_dict(), "ckpt": args.ckpt})
    save_record(out / "record.bin", record)
    summary = {"sum_squared_corr": sum_squared_corr(record), "layers": {}}
    for layer in record.layers:
        si, bi = layer
        corr = correlation_matrix(record, layer)
        with open(out / f"corr_stage{si}_block{bi}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            for row in corr:
                writer.writerow([repr(v) for v in row])
        tops = {c: top_activated(record, layer, c, min(args.top_k, len(record))).tolist()
                for c in range(record.gates[layer].shape[1])}
        with open(out / f"top_stage{si}_block{bi}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["channel"] + [f"rank{i}" for i in range(min(args.top_k, len(record)))])
            for c, ids in tops.items():
                writer.writerow([c] + ids)
        summary["layers"][f"{si}.{bi}"] = {
            "squared_corr_sum": float((corr * corr).sum()),
            "top1_overlap": top_overlap(record, layer, k=1),
        }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(json.dumps({"sum_squared_corr": summary["sum_squared_corr"]}))
    return 0


def _cmd_complexity(args) -> int:
    arch = _load_arch(args.arch, args.recalib)
    model = build_resnet(arch, seed=0)
    default_size = 32 if arch.stem == "cifar" else 224
    size = args.input_size or default_size
    report = complexity_analyze(model, input_shape=(arch.in_channels, size, size),
                                include_running_stats=args.running_stats)
    print(report.to_json())
    if args.out:
        out = Path(args.out)
        _write_manifest(out, "complexity", {"arch": arch.to_dict(), "input_size": size})
        (out / "report.json").write_text(report.to_json())
        (out / "report.txt").write_text(format_table(report))
    return 0


def _cmd_gradcheck(args) -> int:
    seeds = range(args.seed, args.seed + args.count)
    results = run_suite(seeds)
    worst = max(results.values())
    for name, err in sorted(results.items()):
        print(f"{name:<22} {err:.3e}")
    print(f"max relative error: {worst:.3e} (tolerance {SUITE_TOLERANCE:.0e})")
    return 0 if worst < SUITE_TOLERANCE else 1


def _cmd_synth(args) -> int:
    spec = SynthStyleSpec(
        num_classes=args.classes,
        per_class=args.per_class,
        size=args.size,
        channels=args.channels,
        class_means=tuple(float(v) for v in args.means.split(",")) if args.means else None,
        class_stds=tuple(float(v) for v in args.stds.split(",")) if args.stds else None,
        jitter=args.jitter,
        seed=args.seed,
    )
    out = Path(args.out)
    _write_manifest(out, "synth", {"spec": spec.to_dict()})
    train_set = synth_style(spec, split="train")
    test_set = synth_style(spec, split="test")
    save_dataset(out / "train.bin", train_set)
    save_dataset(out / "test.bin", test_set)
    print(json.dumps({"train": len(train_set), "test": len(test_set), "out": str(out)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="style-recal",
                                     description="Style-based channel recalibration experiment harness")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, model=False):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--precision", choices=["f32", "f64"], default="f32")
        if data:
            p.add_argument("--data", default=None, help="dataset container or binary-batch directory "
                                                        "(default: STYLE_RECAL_DATA)")
            p.add_argument("--batch", type=int, default=128)
        if model:
            p.add_argument("--arch", required=True, help="architecture JSON path or preset name")
            p.add_argument("--recalib", default=None, help="none | srm | se | se:<r> | JSON variant")

    p = sub.add_parser("train", help="train a model")
    common(p, model=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--schedule", default=None, help="comma list of step:lr, e.g. 0:0.2,32000:0.02")
    p.add_argument("--augment", choices=["none", "pad-crop-flip"], default="none")
    p.add_argument("--log-every", type=int, default=50)
    p.add_argument("--eval-every", type=int, default=0)
    p.add_argument("--test-data", default=None)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p, model=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--fold-bn", action="store_true", help="fold recalibration BN before evaluating")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("prune", help="per-image dynamic channel pruning sweep")
    common(p, model=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--stage", type=int, required=True)
    p.add_argument("--ratios", default="0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_prune)

    p = sub.add_parser("analyze", help="capture gates; correlation and top-activated reports")
    common(p, model=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--fold-bn", action="store_true")
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("complexity", help="parameter and FLOP report")
    common(p, data=False, model=True)
    p.add_argument("--input-size", type=int, default=None)
    p.add_argument("--running-stats", action="store_true",
                   help="count BN running statistics as parameters")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_complexity)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    common(p, data=False)
    p.add_argument("--count", type=int, default=1, help="number of seeds starting at --seed")
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("synth", help="generate the synthetic style-discriminable dataset")
    common(p, data=False)
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=128)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--jitter", type=float, default=0.08)
    p.add_argument("--means", default=None, help="comma list, one per class")
    p.add_argument("--stds", default=None, help="comma list, one per class")
    p.set_defaults(func=_cmd_synth)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _set_threads(args.threads)
        if getattr(args, "precision", "f32"):
            _set_precision(args.precision)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
