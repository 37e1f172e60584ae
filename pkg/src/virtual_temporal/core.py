"""Dataset model, manifests, configuration and run records shared by the pipeline."""
from __future__ import annotations

import configparser
import io
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
from PIL import Image

IGNORE_INDEX = 255
SPLITS = ("train", "valid", "eval")

DEFAULT_PALETTE = {
    0: ("background", (60, 40, 30)),
    1: ("crop", (40, 200, 60)),
    2: ("weed", (230, 60, 60)),
}


class DatasetError(Exception):
    """Raised when a manifest or one of its files cannot be loaded."""


class ValidationError(DatasetError):
    """Raised when loaded data violates a domain invariant."""


class RunRecordError(Exception):
    """Raised for corrupt, schema-mismatched or invariant-violating run records."""


@dataclass
class AnnotatedStill:
    image_id: str
    image: np.ndarray  # H x W x 3, uint8
    mask: np.ndarray  # H x W, class indices

    @property
    def width_px(self) -> int:
        return int(self.image.shape[1])

    @property
    def height_px(self) -> int:
        return int(self.image.shape[0])

    def validate(self, num_classes: int) -> None:
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValidationError(f"{self.image_id}: image must be HxWx3, got {self.image.shape}")
        if self.mask.shape != self.image.shape[:2]:
            raise ValidationError(
                f"{self.image_id}: mask shape {self.mask.shape} does not match image {self.image.shape[:2]}"
            )
        bad = (self.mask >= num_classes) & (self.mask != IGNORE_INDEX)
        if bad.any():
            values = sorted(set(np.unique(self.mask[bad]).tolist()))
            raise ValidationError(
                f"{self.image_id}: mask contains class indices {values} outside [0, {num_classes})"
            )


@dataclass(frozen=True)
class MotionModel:
    """Gaussian per-frame camera step in pixels plus the permitted directions of travel."""

    mu_w: float
    sigma_w: float
    mu_h: float
    sigma_h: float
    allowed_lambda: tuple[int, ...] = (-1, 1)
    allowed_gamma: tuple[int, ...] = (-1, 1)

    def __post_init__(self):
        if self.sigma_w < 0 or self.sigma_h < 0:
            raise ValueError("motion standard deviations must be >= 0")
        for name in ("allowed_lambda", "allowed_gamma"):
            values = tuple(getattr(self, name))
            if not values:
                raise ValueError(f"{name} must be non-empty")
            if any(v not in (-1, 1) for v in values):
                raise ValueError(f"{name} entries must be -1 or +1, got {values}")
            object.__setattr__(self, name, values)


# Published motion estimates for the two field datasets (pixels per frame).
BUP20_MOTION = MotionModel(5.0, 10.0, 1.0, 3.0, allowed_lambda=(-1, 1), allowed_gamma=(1,))
SB20_MOTION = MotionModel(2.0, 3.0, 5.0, 7.0, allowed_lambda=(1,), allowed_gamma=(1,))


@dataclass
class Frame:
    image: np.ndarray
    mask: Optional[np.ndarray]
    crop_origin: tuple[int, int]  # (W_n, H_n) in source coordinates


@dataclass
class FrameSequence:
    frames: list[Frame]
    fully_labelled: bool
    direction: tuple[int, int]
    source_image_id: str

    def __post_init__(self):
        self.validate()

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def crop_size(self) -> tuple[int, int]:
        """(h, w) shared by every frame."""
        return tuple(self.frames[0].image.shape[:2])

    @property
    def labelled_indices(self) -> list[int]:
        return [i for i, f in enumerate(self.frames) if f.mask is not None]

    def validate(self) -> None:
        if not self.frames:
            raise ValueError("a sequence needs at least one frame")
        size = self.frames[0].image.shape[:2]
        for i, f in enumerate(self.frames):
            if f.image.shape[:2] != size:
                raise ValueError(f"frame {i} has size {f.image.shape[:2]}, expected {size}")
            if f.mask is not None and f.mask.shape != size:
                raise ValueError(f"frame {i} mask has size {f.mask.shape}, expected {size}")
        labelled = self.labelled_indices
        if self.fully_labelled:
            if len(labelled) != len(self.frames):
                raise ValueError("fully labelled sequence is missing masks")
        elif labelled != [len(self.frames) - 1]:
            raise ValueError("a partially labelled sequence must carry exactly one mask, on its last frame")


LAYER_TAGS = tuple(f"d:{k}-{p}" for k in range(4) for p in "ABCD") + ("BN",)
ENCODER_TAGS = tuple(f"e:{k}-{p}" for k in range(4) for p in "ABCD")
RESAMPLE_MODES = ("Conv", "Bilinear", "None")


@dataclass(frozen=True)
class FeedbackSpec:
    """One recurrent wiring: where activations are taken, where they re-enter, and how they are resampled."""

    extract_point: str = "d:0-B"
    insert_point: str = "d:0-D"
    resample_mode: str = "Conv"
    extract_both: bool = False

    def __post_init__(self):
        if self.insert_point in ENCODER_TAGS or self.insert_point.startswith("e:"):
            raise ValueError(
                f"insertion point {self.insert_point!r} is in the encoder; only decoder or BN insertion is supported"
            )
        if self.extract_point.startswith("e:"):
            raise ValueError(f"extraction point {self.extract_point!r} is in the encoder")
        for tag in (self.extract_point, self.insert_point):
            if tag not in LAYER_TAGS:
                raise ValueError(f"unknown layer tag {tag!r}; expected one of {', '.join(LAYER_TAGS)}")
        if self.resample_mode not in RESAMPLE_MODES:
            raise ValueError(f"resample_mode must be one of {RESAMPLE_MODES}, got {self.resample_mode!r}")

    def describe(self) -> str:
        return f"{self.extract_point} -> {self.insert_point} ({self.resample_mode})"


@dataclass
class SceneConfig:
    canvas_width: int = 1200
    canvas_height: int = 800
    frame_width: int = 256
    frame_height: int = 192
    objects_per_class: tuple[int, ...] = (22, 18)
    object_size: tuple[int, int] = (24, 64)
    stratify: bool = True  # spread each class evenly over the camera tiles
    video_length: int = 600
    passes: int = 5
    annotation_stride: int = 10
    holdout_stride: int = 0  # stride on valid/eval passes; 0 = annotation_stride
    split_passes: tuple[int, int, int] = (3, 1, 1)
    mu_w: float = 1.2
    sigma_w: float = 0.6
    mu_h: float = 0.3
    sigma_h: float = 0.4


@dataclass
class ExperimentConfig:
    dataset: str = ""
    num_classes: int = 3
    crop_height: int = 144
    crop_width: int = 192
    frames: int = 5
    motion: MotionModel = field(default_factory=lambda: MotionModel(1.2, 0.6, 0.3, 0.4, (-1, 1), (1,)))
    per_sequence_draw: bool = False
    regenerate_sequences: bool = False
    feedback: Optional[FeedbackSpec] = field(default_factory=FeedbackSpec)
    base_channels: int = 64
    learning_rate: float = 0.001
    momentum: float = 0.8
    scheduler_step: int = 100
    scheduler_gamma: float = 0.8
    epochs: int = 500
    batch_size: int = 4
    seed: int = 0
    loss_mask_mode: str = "AllFrames"
    bptt_mode: str = "Full"
    class_weighted_loss: bool = False
    parent_checkpoint: Optional[str] = None
    scene: SceneConfig = field(default_factory=SceneConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.frames < 1:
            raise ValueError("frames (N) must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size (B) must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.loss_mask_mode not in ("AllFrames", "LastFrameOnly"):
            raise ValueError(f"unknown loss_mask_mode {self.loss_mask_mode!r}")
        if self.bptt_mode not in ("Full", "Detached"):
            raise ValueError(f"unknown bptt_mode {self.bptt_mode!r}")
        if self.crop_height % 16 or self.crop_width % 16:
            raise ValueError("crop size must be divisible by 16")
        sc = self.scene
        if sc.frame_height % 16 or sc.frame_width % 16:
            raise ValueError("source frame size must be divisible by 16 (still and real sequences run uncropped)")
        if self.crop_height > sc.frame_height or self.crop_width > sc.frame_width:
            raise ValueError(
                f"crop {self.crop_width}x{self.crop_height} exceeds source frame {sc.frame_width}x{sc.frame_height}"
            )

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["motion"]["allowed_lambda"] = list(self.motion.allowed_lambda)
        d["motion"]["allowed_gamma"] = list(self.motion.allowed_gamma)
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ExperimentConfig":
        d = dict(d)
        m = dict(d.pop("motion"))
        m["allowed_lambda"] = tuple(m["allowed_lambda"])
        m["allowed_gamma"] = tuple(m["allowed_gamma"])
        fb = d.pop("feedback")
        scene = dict(d.pop("scene"))
        for key in ("objects_per_class", "object_size", "split_passes"):
            scene[key] = tuple(scene[key])
        return cls(
            motion=MotionModel(**m),
            feedback=FeedbackSpec(**fb) if fb is not None else None,
            scene=SceneConfig(**scene),
            **d,
        )


# --- config files -----------------------------------------------------------

_CONFIG_KEYS = {
    "data": {"dataset": "dataset", "num_classes": "num_classes"},
    "sequence": {
        "frames": "frames",
        "crop_width": "crop_width",
        "crop_height": "crop_height",
        "per_sequence_draw": "per_sequence_draw",
        "regenerate_sequences": "regenerate_sequences",
    },
    "model": {"base_channels": "base_channels"},
    "train": {
        "learning_rate": "learning_rate",
        "momentum": "momentum",
        "scheduler_step": "scheduler_step",
        "scheduler_gamma": "scheduler_gamma",
        "epochs": "epochs",
        "batch_size": "batch_size",
        "seed": "seed",
        "loss_mask_mode": "loss_mask_mode",
        "bptt_mode": "bptt_mode",
        "class_weighted_loss": "class_weighted_loss",
        "parent_checkpoint": "parent_checkpoint",
    },
}


def _parse_value(raw: str, default: Any) -> Any:
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(type(default[0])(v) for v in raw.replace(",", " ").split())
    if default is None:
        return None if raw.lower() in ("", "none") else raw
    return raw


def _int_tuple(raw: str) -> tuple[int, ...]:
    return tuple(int(v) for v in raw.replace(",", " ").split())


def read_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Read an INI-style experiment config; keys missing from the file keep their defaults.

    `overrides` maps flat field names (e.g. ``epochs``, ``mu_w``) to values and wins over the file.
    """
    base = ExperimentConfig()
    values: dict[str, Any] = {}
    motion = dataclasses.asdict(base.motion)
    feedback: dict[str, Any] | None = dataclasses.asdict(base.feedback)
    scene = dataclasses.asdict(base.scene)

    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        parser = configparser.ConfigParser()
        parser.read(path, encoding="utf-8")
        for section, keys in _CONFIG_KEYS.items():
            if parser.has_section(section):
                for key, raw in parser.items(section):
                    if key not in keys:
                        raise ValueError(f"unknown key [{section}] {key}")
                    values[keys[key]] = _parse_value(raw, getattr(base, keys[key]))
        if parser.has_section("motion"):
            for key, raw in parser.items("motion"):
                if key in ("allowed_lambda", "allowed_gamma"):
                    motion[key] = _int_tuple(raw)
                elif key in motion:
                    motion[key] = float(raw)
                else:
                    raise ValueError(f"unknown key [motion] {key}")
        if parser.has_section("feedback"):
            fb = dict(parser.items("feedback"))
            if fb.get("enabled", "true").strip().lower() in ("0", "false", "no", "off"):
                feedback = None
            else:
                feedback["extract_point"] = fb.get("extract", feedback["extract_point"]).strip()
                feedback["insert_point"] = fb.get("insert", feedback["insert_point"]).strip()
                feedback["resample_mode"] = fb.get("mode", feedback["resample_mode"]).strip()
                if "extract_both" in fb:
                    feedback["extract_both"] = _parse_value(fb["extract_both"], False)
        if parser.has_section("synth"):
            for key, raw in parser.items("synth"):
                if key not in scene:
                    raise ValueError(f"unknown key [synth] {key}")
                scene[key] = _parse_value(raw, scene[key])

    if path is not None and values.get("dataset") and not Path(values["dataset"]).is_absolute():
        # relative dataset paths in a config file are relative to that file
        values["dataset"] = str(Path(path).parent / values["dataset"])

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key in motion:
            motion[key] = tuple(value) if key.startswith("allowed") else float(value)
        elif key in scene:
            scene[key] = value
        elif key in ("extract_point", "insert_point", "resample_mode", "extract_both"):
            if feedback is None:
                feedback = dataclasses.asdict(FeedbackSpec())
            feedback[key] = value
        elif key == "feedback" and value is False:
            feedback = None
        else:
            values[key] = value

    motion["allowed_lambda"] = tuple(motion["allowed_lambda"])
    motion["allowed_gamma"] = tuple(motion["allowed_gamma"])
    for key in ("objects_per_class", "object_size", "split_passes"):
        scene[key] = tuple(scene[key])
    return ExperimentConfig(
        motion=MotionModel(**motion),
        feedback=FeedbackSpec(**feedback) if feedback is not None else None,
        scene=SceneConfig(**scene),
        **values,
    )


def format_config(config: ExperimentConfig) -> str:
    parser = configparser.ConfigParser()
    for section, keys in _CONFIG_KEYS.items():
        parser[section] = {}
        for key, attr in keys.items():
            value = getattr(config, attr)
            parser[section][key] = "none" if value is None else str(value).lower() if isinstance(value, bool) else str(value)
    m = config.motion
    parser["motion"] = {
        "mu_w": repr(m.mu_w),
        "sigma_w": repr(m.sigma_w),
        "mu_h": repr(m.mu_h),
        "sigma_h": repr(m.sigma_h),
        "allowed_lambda": ", ".join(str(v) for v in m.allowed_lambda),
        "allowed_gamma": ", ".join(str(v) for v in m.allowed_gamma),
    }
    if config.feedback is None:
        parser["feedback"] = {"enabled": "false"}
    else:
        fb = config.feedback
        parser["feedback"] = {
            "extract": fb.extract_point,
            "insert": fb.insert_point,
            "mode": fb.resample_mode,
            "extract_both": str(fb.extract_both).lower(),
        }
    parser["synth"] = {
        k: ", ".join(str(x) for x in v) if isinstance(v, tuple) else str(v)
        for k, v in dataclasses.asdict(config.scene).items()
    }
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def write_config(config: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(format_config(config), encoding="utf-8")


# --- manifests --------------------------------------------------------------


@dataclass(frozen=True)
class ManifestRecord:
    image_id: str
    image_path: str
    mask_path: str
    split: str


def parse_manifest(text: str) -> list[ManifestRecord]:
    records = []
    seen: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise DatasetError(f"manifest line {lineno}: expected 4 tab-separated fields, got {len(fields)}")
        image_id, image_path, mask_path, split = (f.strip() for f in fields)
        if split not in SPLITS:
            raise DatasetError(f"manifest line {lineno}: unknown split {split!r}")
        if image_id in seen:
            raise DatasetError(
                f"manifest line {lineno}: image_id {image_id!r} already listed on line {seen[image_id]}"
            )
        seen[image_id] = lineno
        records.append(ManifestRecord(image_id, image_path, mask_path, split))
    return records


def format_manifest(records: list[ManifestRecord]) -> str:
    for r in records:
        for value in (r.image_id, r.image_path, r.mask_path, r.split):
            if "\t" in value or "\n" in value:
                raise DatasetError(f"manifest field {value!r} contains a tab or newline")
    return "".join(f"{r.image_id}\t{r.image_path}\t{r.mask_path}\t{r.split}\n" for r in records)


def read_image(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except FileNotFoundError:
        raise DatasetError(f"missing image file: {path}") from None


def read_mask(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "P"):
                raise DatasetError(f"mask {path} must be a single-channel index image, got mode {im.mode}")
            return np.asarray(im, dtype=np.uint8)
    except FileNotFoundError:
        raise DatasetError(f"missing mask file: {path}") from None


def write_image(path: str | Path, image: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8), mode="RGB").save(path)


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(mask, dtype=np.uint8), mode="L").save(path)


def write_palette(path: str | Path, palette: dict[int, tuple[str, tuple[int, int, int]]] = DEFAULT_PALETTE) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for index, (name, (r, g, b)) in sorted(palette.items()):
            fh.write(f"{index}\t{name}\t{r} {g} {b}\n")


def colorize(mask: np.ndarray, palette=DEFAULT_PALETTE) -> np.ndarray:
    out = np.zeros(mask.shape + (3,), dtype=np.uint8)
    for index, (_, rgb) in palette.items():
        out[mask == index] = rgb
    return out


@dataclass
class Dataset:
    root: Path
    stills: list[AnnotatedStill]
    splits: dict[str, list[str]]
    records: list[ManifestRecord]

    def split(self, name: str) -> list[AnnotatedStill]:
        wanted = set(self.splits[name])
        return [s for s in self.stills if s.image_id in wanted]

    def record(self, image_id: str) -> ManifestRecord:
        for r in self.records:
            if r.image_id == image_id:
                return r
        raise KeyError(image_id)


def load_dataset(manifest_path: str | Path, num_classes: int = 3) -> Dataset:
    """Load every still listed in a manifest and check it against the class count."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.tsv"
    if not manifest_path.is_file():
        raise DatasetError(f"missing manifest file: {manifest_path}")
    records = parse_manifest(manifest_path.read_text(encoding="utf-8"))
    root = manifest_path.parent
    stills = []
    splits: dict[str, list[str]] = {s: [] for s in SPLITS}
    for r in records:
        image = read_image(root / r.image_path)
        mask = read_mask(root / r.mask_path)
        still = AnnotatedStill(r.image_id, image, mask)
        still.validate(num_classes)
        stills.append(still)
        splits[r.split].append(r.image_id)
    return Dataset(root, stills, splits, records)


# --- run records ------------------------------------------------------------

RUN_RECORD_KEYS = ("config", "train_loss", "valid_miou", "best_epoch", "checkpoint", "eval_miou")


@dataclass
class RunRecord:
    config: dict[str, Any]
    train_loss: list[float] = field(default_factory=list)
    valid_miou: list[float] = field(default_factory=list)
    best_epoch: int = -1
    checkpoint: str = ""
    eval_miou: float = 0.0

    def check(self) -> None:
        if len(self.train_loss) != len(self.valid_miou):
            raise RunRecordError(
                f"train_loss has {len(self.train_loss)} entries but valid_miou has {len(self.valid_miou)}"
            )
        if any(not (0.0 <= v <= 1.0) for v in self.valid_miou):
            raise RunRecordError("valid_miou entries must lie in [0, 1]")
        if not (0.0 <= self.eval_miou <= 1.0):
            raise RunRecordError(f"eval_miou {self.eval_miou} outside [0, 1]")
        if self.valid_miou:
            best = int(np.argmax(self.valid_miou))
            if self.best_epoch != best:
                raise RunRecordError(
                    f"best_epoch {self.best_epoch} is not the argmax ({best}) of the validation curve"
                )
        elif self.best_epoch != -1:
            raise RunRecordError("best_epoch must be -1 when there is no validation curve")


def save_run(record: RunRecord, path: str | Path) -> None:
    record.check()
    doc = {
        "config": record.config,
        "train_loss": [float(v) for v in record.train_loss],
        "valid_miou": [float(v) for v in record.valid_miou],
        "best_epoch": int(record.best_epoch),
        "checkpoint": str(record.checkpoint),
        "eval_miou": float(record.eval_miou),
    }
    for v in doc["train_loss"] + doc["valid_miou"] + [doc["eval_miou"]]:
        if not math.isfinite(v):
            raise RunRecordError("run records cannot hold non-finite numbers")
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def load_run(path: str | Path) -> RunRecord:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise RunRecordError(f"{path}: not a valid run record ({exc})") from None
    if not isinstance(doc, dict):
        raise RunRecordError(f"{path}: run record must be a key/value document")
    missing = [k for k in RUN_RECORD_KEYS if k not in doc]
    extra = [k for k in doc if k not in RUN_RECORD_KEYS]
    if missing or extra:
        raise RunRecordError(f"{path}: schema mismatch (missing {missing}, unexpected {extra})")
    try:
        record = RunRecord(
            config=dict(doc["config"]),
            train_loss=[float(v) for v in doc["train_loss"]],
            valid_miou=[float(v) for v in doc["valid_miou"]],
            best_epoch=int(doc["best_epoch"]),
            checkpoint=str(doc["checkpoint"]),
            eval_miou=float(doc["eval_miou"]),
        )
    except (TypeError, ValueError) as exc:
        raise RunRecordError(f"{path}: malformed field ({exc})") from None
    record.check()
    return record
