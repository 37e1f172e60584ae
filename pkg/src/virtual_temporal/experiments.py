"""Experiment drivers: training modes, feedback sweep, N ablation, reports and the trend protocol."""
from __future__ import annotations

import dataclasses
import json
from functools import lru_cache
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .core import (
    ExperimentConfig,
    FeedbackSpec,
    Frame,
    FrameSequence,
    RunRecord,
    load_dataset,
    load_run,
    write_config,
)
from .evaluator import evaluate_still, evaluate_temporal
from .model import load_checkpoint
from .sequencer import real_sequences, virtual_sequences
from .trainer import train

MODES = ("still-real", "still-virtual", "temporal-real", "temporal-real-bidir", "temporal-virtual", "fine-tune")
STILL_MODES = ("still-real", "still-virtual")
SWEEP_INSERTS = ("d:0-D", "d:1-D", "d:2-D", "d:3-D", "BN")
SWEEP_MODES = ("Conv", "Bilinear")


class ExperimentError(RuntimeError):
    pass


def still_sequence(still) -> FrameSequence:
    return FrameSequence([Frame(still.image, still.mask, (0, 0))], True, (1, 1), still.image_id)


def split_frames(seqs: Sequence[FrameSequence]) -> list[FrameSequence]:
    """Each frame of each sequence as an independent single-frame sample."""
    return [
        FrameSequence([f], True, s.direction, f"{s.source_image_id}#{i}")
        for s in seqs
        for i, f in enumerate(s.frames)
    ]


@lru_cache(maxsize=8)
def _dataset(path: str, num_classes: int):
    return load_dataset(path, num_classes)


@lru_cache(maxsize=32)
def _real(path: str, num_classes: int, split: str, n: int, following: bool):
    return tuple(real_sequences(_dataset(path, num_classes), split, n, from_following=following))


def clear_caches() -> None:
    _dataset.cache_clear()
    _real.cache_clear()


def training_data(mode: str, config: ExperimentConfig):
    ds = _dataset(config.dataset, config.num_classes)
    train_stills = ds.split("train")
    crop = (config.crop_width, config.crop_height)

    def virtual(epoch: int) -> list[FrameSequence]:
        round_index = epoch if config.regenerate_sequences else 0
        return virtual_sequences(
            train_stills, crop, config.frames, config.motion, config.seed, round_index, config.per_sequence_draw
        )

    if mode == "still-real":
        return [still_sequence(s) for s in train_stills]
    if mode == "still-virtual":
        if config.regenerate_sequences:
            return lambda epoch: split_frames(virtual(epoch))
        return split_frames(virtual(0))
    if mode == "temporal-virtual":
        return virtual if config.regenerate_sequences else virtual(0)
    if mode in ("temporal-real", "fine-tune"):
        return list(_real(config.dataset, config.num_classes, "train", config.frames, False))
    if mode == "temporal-real-bidir":
        fwd = _real(config.dataset, config.num_classes, "train", config.frames, False)
        bwd = _real(config.dataset, config.num_classes, "train", config.frames, True)
        return list(fwd) + list(bwd)
    raise ExperimentError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")


def scorer(mode: str, config: ExperimentConfig, split: str) -> Callable:
    """Scoring function on real data of `split`: stills for still modes, real sequences otherwise."""
    if mode in STILL_MODES:
        stills = _dataset(config.dataset, config.num_classes).split(split)
        return lambda net: evaluate_still(net, stills, config.num_classes, config.batch_size)[0]
    seqs = _real(config.dataset, config.num_classes, split, config.frames, False)
    return lambda net: evaluate_temporal(net, seqs, config.num_classes, config.batch_size)[0]


def run_mode(
    mode: str,
    config: ExperimentConfig,
    out_dir: str | Path,
    parent: Optional[str | Path] = None,
    echo: bool = True,
) -> RunRecord:
    if mode not in MODES:
        raise ExperimentError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
    if not config.dataset:
        raise ExperimentError("no dataset configured")
    if mode == "fine-tune":
        if parent is None:
            parent = config.parent_checkpoint
        if parent is None or not Path(parent).is_file():
            raise ExperimentError(f"fine-tune mode needs an existing parent checkpoint (got {parent})")
    else:
        parent = None
    if mode not in STILL_MODES and config.feedback is None:
        raise ExperimentError(f"mode {mode} needs a feedback wiring")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_config(config, out_dir / "config.ini")
    return train(
        config,
        training_data(mode, config),
        validate=scorer(mode, config, "valid"),
        out_dir=out_dir,
        evaluate=scorer(mode, config, "eval"),
        init=parent,
        feedback_enabled=mode not in STILL_MODES,
        extra_config={"mode": mode},
        echo=echo,
    )


def reevaluate(record: RunRecord, split: str = "eval") -> float:
    config = ExperimentConfig.from_dict({k: v for k, v in record.config.items() if k != "mode"})
    mode = record.config.get("mode", "temporal-virtual")
    net = load_checkpoint(record.checkpoint)
    return scorer(mode, config, split)(net)


# --- tables -----------------------------------------------------------------


def format_table(headers: Sequence[str], rows: Sequence[Sequence]) -> str:
    cells = [[str(h) for h in headers]] + [[_fmt(v) for v in r] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(headers))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.2f}"
    return "" if v is None else str(v)


def write_table(out_dir: Path, name: str, headers, rows, extra: Optional[dict] = None) -> str:
    text = format_table(headers, rows)
    (out_dir / f"{name}.txt").write_text(text, encoding="utf-8")
    doc = {"columns": list(headers), "rows": [list(r) for r in rows]}
    doc.update(extra or {})
    (out_dir / f"{name}.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return text


# --- experiment families ----------------------------------------------------


def sweep_feedback(config: ExperimentConfig, out_dir: str | Path, echo: bool = True) -> list[dict]:
    """Train temporal-virtual models for every insertion point x resampling mode, extracting at d:0-B."""
    out_dir = Path(out_dir)
    results = []
    for insert in SWEEP_INSERTS:
        for resample in SWEEP_MODES:
            spec = FeedbackSpec("d:0-B", insert, resample)
            name = f"{insert.replace(':', '')}_{resample}"
            record = run_mode("temporal-virtual", config.replace(feedback=spec), out_dir / name, echo=echo)
            results.append(
                {
                    "feedback": f"d:0-B - {insert}",
                    "mode": resample,
                    "eval_miou": record.eval_miou,
                    "best_valid_miou": max(record.valid_miou),
                    "run": str(out_dir / name / "run.json"),
                }
            )
    winners = {}
    for resample in SWEEP_MODES:
        cells = [r for r in results if r["mode"] == resample]
        winners[resample] = max(cells, key=lambda r: r["eval_miou"])["feedback"]
    ranked = sorted(results, key=lambda r: -r["eval_miou"])
    rows = [
        [i + 1, r["feedback"], r["mode"], 100 * r["eval_miou"], "*" if winners[r["mode"]] == r["feedback"] else ""]
        for i, r in enumerate(ranked)
    ]
    text = write_table(out_dir, "sweep", ["rank", "feedback", "mode", "eval_mIoU", "best_of_mode"], rows, {"winners": winners})
    if echo:
        print(text)
    return ranked


def ablate_n(
    config: ExperimentConfig, out_dir: str | Path, n_list: Sequence[int] = (2, 3, 4, 5), echo: bool = True
) -> dict[int, float]:
    out_dir = Path(out_dir)
    results = {}
    for n in n_list:
        record = run_mode("temporal-virtual", config.replace(frames=n), out_dir / f"N{n}", echo=echo)
        results[n] = record.eval_miou
    rows = [[f"Temporal-Virtual (N={n})", 100 * results[n]] for n in sorted(results, reverse=True)]
    text = write_table(out_dir, "ablation", ["model", "eval_mIoU"], rows)
    plot_curve(
        sorted(results), [100 * results[n] for n in sorted(results)], out_dir / "ablation.png", "N (frames per sequence)", "eval mIoU"
    )
    if echo:
        print(text)
    return results


def plot_curve(xs, ys, path: Path, xlabel: str, ylabel: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(xs, ys, marker="o")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_xticks(list(xs))
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def describe_run(record: RunRecord) -> tuple[str, str, str]:
    cfg = record.config
    fb = cfg.get("feedback")
    mode = cfg.get("mode", "?")
    wiring = "-" if (fb is None or mode in STILL_MODES) else f"{fb['extract_point']} - {fb['insert_point']} {fb['resample_mode']}"
    return mode, wiring, str(cfg.get("frames", ""))


def report(run_paths: Sequence[str | Path], out_dir: str | Path) -> str:
    """Comparison table of several runs; the first run is the reference for absolute improvement."""
    if not run_paths:
        raise ExperimentError("report needs at least one run record")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = [load_run(p) for p in run_paths]
    ref = records[0].eval_miou
    rows = []
    for path, rec in zip(run_paths, records):
        mode, wiring, n = describe_run(rec)
        rows.append(
            [
                str(path),
                mode,
                wiring,
                n,
                rec.best_epoch,
                100 * max(rec.valid_miou) if rec.valid_miou else None,
                100 * rec.eval_miou,
                100 * (rec.eval_miou - ref),
            ]
        )
    headers = ["run", "mode", "feedback", "N", "best_epoch", "valid_mIoU", "eval_mIoU", "abs_improvement"]
    text = write_table(out_dir, "report", headers, rows)

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    for path, rec in zip(run_paths, records):
        ax.plot(range(len(rec.valid_miou)), [100 * v for v in rec.valid_miou], label=describe_run(rec)[0])
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation mIoU")
    ax.legend(fontsize=7)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_dir / "valid_curves.png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    return text


# --- trend protocol -----------------------------------------------------------

TREND_RUNS = (
    "still-real",
    "still-virtual",
    "temporal-real",
    "temporal-virtual",
    "fine-tune",
    "temporal-virtual-N2",
    "temporal-virtual-bilinear",
)


def trend_protocol(
    config: ExperimentConfig,
    out_dir: str | Path,
    seeds: Sequence[int] = (0, 1, 2),
    finetune_epochs: Optional[int] = None,
    echo: bool = False,
    finetune_lr_scale: float = 0.1,
) -> dict[str, list[float]]:
    """Train every model family the trend criteria compare, once per seed; returns eval mIoUs per family.

    Runs whose ``run.json`` already exists under `out_dir` are reused. Fine-tuning starts a fresh
    optimizer, so it runs at `finetune_lr_scale` times the base learning rate.
    """
    out_dir = Path(out_dir)
    results: dict[str, list[float]] = {k: [] for k in TREND_RUNS}
    ft_epochs = finetune_epochs if finetune_epochs is not None else config.epochs

    def run(name: str, mode: str, cfg: ExperimentConfig, parent=None) -> RunRecord:
        path = out_dir / name
        if (path / "run.json").is_file():
            return load_run(path / "run.json")
        return run_mode(mode, cfg, path, parent=parent, echo=echo)

    for seed in seeds:
        cfg = config.replace(seed=seed)
        results["still-real"].append(run(f"s{seed}/still-real", "still-real", cfg).eval_miou)
        results["still-virtual"].append(run(f"s{seed}/still-virtual", "still-virtual", cfg).eval_miou)
        results["temporal-real"].append(run(f"s{seed}/temporal-real", "temporal-real", cfg).eval_miou)
        tv = run(f"s{seed}/temporal-virtual", "temporal-virtual", cfg)
        results["temporal-virtual"].append(tv.eval_miou)
        ft_cfg = cfg.replace(epochs=ft_epochs, learning_rate=cfg.learning_rate * finetune_lr_scale)
        results["fine-tune"].append(run(f"s{seed}/fine-tune", "fine-tune", ft_cfg, parent=tv.checkpoint).eval_miou)
        results["temporal-virtual-N2"].append(
            run(f"s{seed}/temporal-virtual-N2", "temporal-virtual", cfg.replace(frames=2)).eval_miou
        )
        bil = dataclasses.replace(cfg.feedback, resample_mode="Bilinear")
        results["temporal-virtual-bilinear"].append(
            run(f"s{seed}/temporal-virtual-bilinear", "temporal-virtual", cfg.replace(feedback=bil)).eval_miou
        )
    summary = {k: {"per_seed": v, "mean": float(np.mean(v))} for k, v in results.items()}
    (out_dir / "trend.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    rows = [[k, 100 * summary[k]["mean"]] + [100 * x for x in v] for k, v in results.items()]
    write_table(out_dir, "trend", ["run", "mean_eval_mIoU"] + [f"seed_{s}" for s in seeds], rows)
    return results
