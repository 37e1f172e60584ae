"""`vts` command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage error (bad flags, missing or invalid config,
output directory already populated without ``--force``).
"""
from __future__ import annotations

import argparse
import dataclasses
import shutil
import sys
from pathlib import Path

from . import experiments
from .core import (
    ExperimentConfig,
    SceneConfig,
    format_config,
    load_dataset,
    read_config,
    write_config,
)
from .sequencer import make_virtual_sequence, sequence_rng, write_sequence_dir
from .synthdata import synthesize


class UsageError(Exception):
    pass


# flag name -> config key; every numeric hyperparameter can be overridden
_NUMERIC_FLAGS = {
    "num-classes": ("num_classes", int),
    "frames": ("frames", int),
    "crop-width": ("crop_width", int),
    "crop-height": ("crop_height", int),
    "base-channels": ("base_channels", int),
    "lr": ("learning_rate", float),
    "momentum": ("momentum", float),
    "scheduler-step": ("scheduler_step", int),
    "scheduler-gamma": ("scheduler_gamma", float),
    "epochs": ("epochs", int),
    "batch-size": ("batch_size", int),
    "seed": ("seed", int),
    "mu-w": ("mu_w", float),
    "sigma-w": ("sigma_w", float),
    "mu-h": ("mu_h", float),
    "sigma-h": ("sigma_h", float),
}
for _f in dataclasses.fields(SceneConfig):
    if _f.type in ("int", int):
        _NUMERIC_FLAGS[_f.name.replace("_", "-")] = (_f.name, int)
    elif _f.name not in ("mu_w", "sigma_w", "mu_h", "sigma_h") and _f.type in ("float", float):
        _NUMERIC_FLAGS[_f.name.replace("_", "-")] = (_f.name, float)

_CHOICE_FLAGS = {
    "dataset": ("dataset", None),
    "extract": ("extract_point", None),
    "insert": ("insert_point", None),
    "resample-mode": ("resample_mode", ("Conv", "Bilinear", "None")),
    "loss-mask-mode": ("loss_mask_mode", ("AllFrames", "LastFrameOnly")),
    "bptt-mode": ("bptt_mode", ("Full", "Detached")),
}

_BOOL_FLAGS = {
    "per-sequence-draw": "per_sequence_draw",
    "regenerate-sequences": "regenerate_sequences",
    "class-weighted-loss": "class_weighted_loss",
}


def _add_config_args(p: argparse.ArgumentParser, out: bool = True) -> None:
    p.add_argument("config", help="experiment config file (INI); `vts default-config` prints one")
    if out:
        p.add_argument("--out", required=True, help="output directory (created exclusively)")
        p.add_argument("--force", action="store_true", help="replace an existing output directory")
    g = p.add_argument_group("overrides")
    for flag, (key, typ) in _NUMERIC_FLAGS.items():
        g.add_argument(f"--{flag}", dest=key, type=typ, default=None)
    for flag, (key, choices) in _CHOICE_FLAGS.items():
        g.add_argument(f"--{flag}", dest=key, choices=choices, default=None)
    for flag, key in _BOOL_FLAGS.items():
        g.add_argument(f"--{flag}", dest=key, action="store_true", default=None)
    g.add_argument("--no-feedback", dest="feedback", action="store_false", default=None)


def _config_from_args(args) -> ExperimentConfig:
    keys = (
        [k for k, _ in _NUMERIC_FLAGS.values()]
        + [k for k, _ in _CHOICE_FLAGS.values()]
        + list(_BOOL_FLAGS.values())
        + ["feedback"]
    )
    overrides = {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}
    try:
        return read_config(args.config, overrides)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid config {args.config}: {exc}") from exc


def _prepare_out(path: str | Path, force: bool) -> Path:
    path = Path(path)
    if path.exists() and (not path.is_dir() or any(path.iterdir())):
        if not force:
            raise UsageError(f"output directory {path} already exists; pass --force to replace it")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()
    path.mkdir(parents=True, exist_ok=True)
    return path


def _require_dataset(config: ExperimentConfig) -> None:
    if not config.dataset:
        raise UsageError("no dataset given; set [data] dataset in the config or pass --dataset")


# --- commands -----------------------------------------------------------------


def cmd_default_config(args) -> int:
    if args.out:
        write_config(ExperimentConfig(), args.out)
    else:
        sys.stdout.write(format_config(ExperimentConfig()))
    return 0


def cmd_synth(args) -> int:
    config = _config_from_args(args)
    out = _prepare_out(args.out, args.force)
    records = synthesize(config.scene, config.seed, out, config.num_classes)
    write_config(config.replace(dataset="."), out / "config.ini")
    counts = {s: sum(r.split == s for r in records) for s in ("train", "valid", "eval")}
    print(f"wrote {len(records)} annotated stills to {out} ({counts['train']}/{counts['valid']}/{counts['eval']})")
    return 0


def cmd_sequences(args) -> int:
    config = _config_from_args(args)
    _require_dataset(config)
    dataset = load_dataset(config.dataset, config.num_classes)
    out = _prepare_out(args.out, args.force)
    crop = (config.crop_width, config.crop_height)
    stills = dataset.split(args.split)
    clamped = 0
    for still in stills:
        rng = sequence_rng(config.seed, still.image_id, 0)
        seq, template = make_virtual_sequence(still, crop, config.frames, config.motion, rng, config.per_sequence_draw)
        clamped += template.clamped
        write_sequence_dir(seq, out / still.image_id, config.seed, template)
    write_config(config, out / "config.ini")
    print(f"wrote {len(stills)} sequences of N={config.frames} to {out} ({clamped} clamped origins)")
    return 0


def cmd_train(args) -> int:
    config = _config_from_args(args)
    _require_dataset(config)
    if args.mode == "fine-tune":
        parent = args.parent or config.parent_checkpoint
        if not parent or not Path(parent).is_file():
            raise UsageError(f"fine-tune needs an existing parent checkpoint (--parent); got {parent}")
    else:
        parent = None
    out = _prepare_out(args.out, args.force)
    record = experiments.run_mode(args.mode, config, out, parent=parent, echo=not args.quiet)
    print(f"{args.mode}: best epoch {record.best_epoch}, eval mIoU {100 * record.eval_miou:.2f} -> {out / 'run.json'}")
    return 0


def cmd_sweep(args) -> int:
    config = _config_from_args(args)
    _require_dataset(config)
    out = _prepare_out(args.out, args.force)
    write_config(config, out / "config.ini")
    experiments.sweep_feedback(config, out, echo=not args.quiet)
    return 0


def cmd_ablate(args) -> int:
    config = _config_from_args(args)
    _require_dataset(config)
    if any(n < 1 for n in args.n_list):
        raise UsageError("every N must be >= 1")
    out = _prepare_out(args.out, args.force)
    write_config(config, out / "config.ini")
    experiments.ablate_n(config, out, args.n_list, echo=not args.quiet)
    return 0


def cmd_report(args) -> int:
    if not args.runs:
        raise UsageError("report needs at least one run record")
    for r in args.runs:
        if not Path(r).is_file():
            raise UsageError(f"run record not found: {r}")
    out = _prepare_out(args.out, args.force)
    print(experiments.report(args.runs, out), end="")
    return 0


def cmd_evaluate(args) -> int:
    from .core import load_run

    if not Path(args.run).is_file():
        raise UsageError(f"run record not found: {args.run}")
    record = load_run(args.run)
    miou = experiments.reevaluate(record, args.split)
    print(f"{args.split} mIoU {100 * miou:.4f} (recorded eval {100 * record.eval_miou:.4f})")
    return 0


def cmd_trend(args) -> int:
    config = _config_from_args(args)
    _require_dataset(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(config, out / "config.ini")
    results = experiments.trend_protocol(
        config, out, args.seeds, args.finetune_epochs, echo=not args.quiet, finetune_lr_scale=args.finetune_lr_scale
    )
    for name, values in results.items():
        print(f"{name:28s} " + "  ".join(f"{100 * v:6.2f}" for v in values))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vts", description="Virtual temporal sequences for recurrent segmentation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("default-config", help="print (or write) the default config")
    p.add_argument("--out", help="write to this file instead of stdout")
    p.set_defaults(func=cmd_default_config)

    p = sub.add_parser("synth", help="render the synthetic field dataset")
    _add_config_args(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("sequences", help="write virtual sequences for one split")
    _add_config_args(p)
    p.add_argument("--split", default="train", choices=("train", "valid", "eval"))
    p.set_defaults(func=cmd_sequences)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("mode", choices=experiments.MODES)
    _add_config_args(p)
    p.add_argument("--parent", help="parent checkpoint for fine-tune mode")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep-feedback", help="train the 5 insertion points x 2 resampling modes grid")
    _add_config_args(p)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate-n", help="train one temporal-virtual model per sequence length")
    _add_config_args(p)
    p.add_argument("--n-list", type=int, nargs="+", default=[2, 3, 4, 5])
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="compare run records")
    p.add_argument("runs", nargs="*")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("evaluate", help="re-evaluate a run's best checkpoint")
    p.add_argument("run", help="run.json of a finished run")
    p.add_argument("--split", default="eval", choices=("train", "valid", "eval"))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("trend", help="train every model family of the trend comparison over several seeds")
    _add_config_args(p, out=False)
    p.add_argument("--out", required=True, help="output directory; finished runs inside it are reused")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--finetune-epochs", type=int, default=None)
    p.add_argument("--finetune-lr-scale", type=float, default=0.1, help="fine-tune lr as a fraction of --lr")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_trend)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"vts {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"vts {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
