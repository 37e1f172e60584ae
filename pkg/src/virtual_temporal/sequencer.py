"""Virtual temporal sequences from annotated stills, and real last-frame-labelled sequences from video."""
from __future__ import annotations

import json
import re
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import (
    AnnotatedStill,
    Dataset,
    Frame,
    FrameSequence,
    MotionModel,
    read_image,
    read_mask,
    write_image,
    write_mask,
)

SIGMA_MARGIN = 3.0


class SequencingError(ValueError):
    pass


@dataclass(frozen=True)
class SequencingTemplate:
    n_frames: int
    crop_w: int
    crop_h: int
    start: tuple[int, int]
    direction: tuple[int, int]
    origins: tuple[tuple[int, int], ...]
    image_size: tuple[int, int]
    clamped: int = 0

    def windows_in_bounds(self) -> bool:
        W, H = self.image_size
        return all(
            0 <= x and x + self.crop_w <= W and 0 <= y and y + self.crop_h <= H for x, y in self.origins
        )


def sequence_rng(base_seed: int, image_id: str, index: int = 0) -> np.random.Generator:
    """Independent stream for sequence `index` of `image_id`, stable across iteration order."""
    ss = np.random.SeedSequence([int(base_seed) & 0xFFFFFFFF, zlib.crc32(image_id.encode("utf-8")), int(index)])
    return np.random.default_rng(ss)


def _drift_extent(mu: float, sigma: float, sign: int, n_max: int, k: float) -> tuple[float, float]:
    lo_step, hi_step = sign * (mu - k * sigma), sign * (mu + k * sigma)
    return n_max * min(0.0, lo_step, hi_step), n_max * max(0.0, lo_step, hi_step)


def _start_range(slack: int, mu: float, sigma: float, sign: int, n_max: int) -> tuple[int, int]:
    """Integer start interval keeping the k-sigma drift envelope inside `slack`.

    Uses k = 3 when it fits and otherwise the widest k in [0, 3] that does; raises when even the
    mean drift alone cannot fit.
    """

    def bounds(k: float) -> tuple[int, int]:
        lo, hi = _drift_extent(mu, sigma, sign, n_max, k)
        return int(np.ceil(-lo - 1e-9)), int(np.floor(slack - hi + 1e-9))

    lo, hi = bounds(SIGMA_MARGIN)
    if lo <= hi:
        return lo, hi
    lo, hi = bounds(0.0)
    if lo > hi:
        raise SequencingError(
            f"no feasible start: mean drift {abs(mu) * n_max:.1f}px over {n_max + 1} frames exceeds "
            f"the {slack}px of room; use a smaller N or crop"
        )
    a, b = 0.0, SIGMA_MARGIN
    for _ in range(40):
        mid = 0.5 * (a + b)
        lo_m, hi_m = bounds(mid)
        if lo_m <= hi_m:
            a = mid
        else:
            b = mid
    return bounds(a)


def _fit_start(start: int, offsets: np.ndarray, slack: int) -> int:
    """Smallest move of `start` that brings every offset window into [0, slack], if the span allows."""
    lo, hi = start + int(offsets.min()), start + int(offsets.max())
    if lo < 0:
        start -= lo
    elif hi > slack:
        start -= hi - slack
    return min(max(start, 0), slack)


def plan_template(
    img_size: tuple[int, int],
    crop: tuple[int, int],
    n_frames: int,
    motion: MotionModel,
    direction: tuple[int, int],
    rng: np.random.Generator,
    start: Optional[tuple[int, int]] = None,
    per_sequence_draw: bool = False,
    shift_into_bounds: bool = True,
) -> SequencingTemplate:
    """Plan the crop origins of one virtual sequence.

    Frame n sits at ``(W_s + round(g_w * lam * n), H_s + round(g_h * gam * n))`` with
    ``g_w ~ N(mu_w, sigma_w^2)`` and ``g_h ~ N(mu_h, sigma_h^2)`` drawn afresh for every frame index
    (or once for the whole sequence with ``per_sequence_draw``). Origins are clamped into the image.

    Args:
        img_size: source (W, H).
        crop: window (w, h).
        direction: (lam, gam), each -1 or +1.
        start: explicit (W_s, H_s); drawn uniformly from the feasible region when omitted.
    """
    W, H = img_size
    w, h = crop
    if w > W or h > H:
        raise SequencingError(f"crop {w}x{h} is larger than image {W}x{H}")
    if n_frames < 1:
        raise SequencingError("N must be >= 1")
    lam, gam = direction
    if lam not in motion.allowed_lambda or gam not in motion.allowed_gamma:
        raise SequencingError(
            f"direction {direction} not permitted by motion model "
            f"(lambda in {motion.allowed_lambda}, gamma in {motion.allowed_gamma})"
        )
    n_max = n_frames - 1
    if start is None:
        x_lo, x_hi = _start_range(W - w, motion.mu_w, motion.sigma_w, lam, n_max)
        y_lo, y_hi = _start_range(H - h, motion.mu_h, motion.sigma_h, gam, n_max)
        start = (int(rng.integers(x_lo, x_hi + 1)), int(rng.integers(y_lo, y_hi + 1)))
    ws, hs = int(start[0]), int(start[1])
    if not (0 <= ws <= W - w and 0 <= hs <= H - h):
        raise SequencingError(f"start {start} puts the first window outside the image")

    if per_sequence_draw:
        gw = np.full(n_frames, rng.normal(motion.mu_w, motion.sigma_w))
        gh = np.full(n_frames, rng.normal(motion.mu_h, motion.sigma_h))
    else:
        gw = rng.normal(motion.mu_w, motion.sigma_w, size=n_frames)
        gh = rng.normal(motion.mu_h, motion.sigma_h, size=n_frames)

    n = np.arange(n_frames)
    dx = np.rint(gw * lam * n).astype(np.int64)
    dy = np.rint(gh * gam * n).astype(np.int64)
    if shift_into_bounds:
        ws = _fit_start(ws, dx, W - w)
        hs = _fit_start(hs, dy, H - h)
    xs, ys = ws + dx, hs + dy
    clamped = int(np.sum((xs < 0) | (xs > W - w)) + np.sum((ys < 0) | (ys > H - h)))
    xs = np.clip(xs, 0, W - w)
    ys = np.clip(ys, 0, H - h)
    return SequencingTemplate(
        n_frames=n_frames,
        crop_w=w,
        crop_h=h,
        start=(ws, hs),
        direction=(int(lam), int(gam)),
        origins=tuple((int(x), int(y)) for x, y in zip(xs, ys)),
        image_size=(W, H),
        clamped=clamped,
    )


def generate_virtual_sequence(still: AnnotatedStill, template: SequencingTemplate) -> FrameSequence:
    if template.image_size != (still.width_px, still.height_px):
        raise SequencingError(
            f"template planned for {template.image_size}, still {still.image_id} is "
            f"{(still.width_px, still.height_px)}"
        )
    if not template.windows_in_bounds():
        raise SequencingError("template has windows outside the source image")
    w, h = template.crop_w, template.crop_h
    frames = [
        Frame(
            image=still.image[y : y + h, x : x + w].copy(),
            mask=still.mask[y : y + h, x : x + w].copy(),
            crop_origin=(x, y),
        )
        for x, y in template.origins
    ]
    return FrameSequence(frames, fully_labelled=True, direction=template.direction, source_image_id=still.image_id)


def choose_direction(motion: MotionModel, rng: np.random.Generator) -> tuple[int, int]:
    lam = motion.allowed_lambda[int(rng.integers(len(motion.allowed_lambda)))]
    gam = motion.allowed_gamma[int(rng.integers(len(motion.allowed_gamma)))]
    return int(lam), int(gam)


def make_virtual_sequence(
    still: AnnotatedStill,
    crop: tuple[int, int],
    n_frames: int,
    motion: MotionModel,
    rng: np.random.Generator,
    per_sequence_draw: bool = False,
) -> tuple[FrameSequence, SequencingTemplate]:
    """Draw a direction, plan a template and crop it: the whole virtual path for one still."""
    direction = choose_direction(motion, rng)
    template = plan_template(
        (still.width_px, still.height_px), crop, n_frames, motion, direction, rng, per_sequence_draw=per_sequence_draw
    )
    return generate_virtual_sequence(still, template), template


def virtual_sequences(
    stills: Sequence[AnnotatedStill],
    crop: tuple[int, int],
    n_frames: int,
    motion: MotionModel,
    base_seed: int,
    round_index: int = 0,
    per_sequence_draw: bool = False,
) -> list[FrameSequence]:
    """One virtual sequence per still; `round_index` selects a fresh set (e.g. per epoch)."""
    out = []
    for still in stills:
        rng = sequence_rng(base_seed, still.image_id, round_index)
        seq, _ = make_virtual_sequence(still, crop, n_frames, motion, rng, per_sequence_draw)
        out.append(seq)
    return out


def assemble_real_sequence(
    video_frames: Sequence[np.ndarray],
    annotated_last: AnnotatedStill,
    n_frames: int,
    direction: tuple[int, int] = (1, 1),
) -> FrameSequence:
    """Last-frame-labelled sequence: the N-1 frames preceding the annotated one, oldest first.

    `video_frames` holds the frames immediately before the annotated frame in temporal order;
    only the trailing N-1 are used.
    """
    if n_frames < 1:
        raise SequencingError("N must be >= 1")
    need = n_frames - 1
    if len(video_frames) < need:
        raise SequencingError(
            f"annotated frame {annotated_last.image_id} has {len(video_frames)} preceding frames, need {need}"
        )
    size = annotated_last.image.shape
    context = list(video_frames[len(video_frames) - need :]) if need else []
    for i, img in enumerate(context):
        if img.shape != size:
            raise SequencingError(
                f"preceding frame {i} of {annotated_last.image_id} has shape {img.shape}, expected {size}"
            )
    frames = [Frame(image=img, mask=None, crop_origin=(0, 0)) for img in context]
    frames.append(Frame(image=annotated_last.image, mask=annotated_last.mask, crop_origin=(0, 0)))
    return FrameSequence(
        frames,
        fully_labelled=n_frames == 1,
        direction=direction,
        source_image_id=annotated_last.image_id,
    )


def reverse_sequence(seq: FrameSequence) -> FrameSequence:
    if not seq.fully_labelled:
        raise SequencingError(
            f"cannot reverse {seq.source_image_id}: only its last frame is labelled and reversal would move it first"
        )
    return FrameSequence(
        frames=list(reversed(seq.frames)),
        fully_labelled=True,
        direction=(-seq.direction[0], -seq.direction[1]),
        source_image_id=seq.source_image_id,
    )


# --- real sequences from an exported video directory ------------------------

_FRAME_RE = re.compile(r"frame_(\d+)\.png$")


def frame_index(image_path: str) -> int:
    m = _FRAME_RE.search(image_path)
    if m is None:
        raise SequencingError(f"cannot recover a video frame index from {image_path!r}")
    return int(m.group(1))


def read_path_meta(video_dir: str | Path) -> list[dict]:
    path = Path(video_dir) / "path.meta"
    doc = json.loads(path.read_text(encoding="utf-8"))
    return doc["frames"]


def real_sequences(
    dataset: Dataset,
    split: str,
    n_frames: int,
    from_following: bool = False,
) -> list[FrameSequence]:
    """Real sequences for every annotated still of `split`, built from ``video/`` next to the manifest.

    With `from_following` the N-1 frames *after* the annotated frame are played backwards so the
    annotated frame still comes last; this yields the opposite direction of travel.
    """
    video_dir = dataset.root / "video"
    path = read_path_meta(video_dir)
    seqs = []
    for still in dataset.split(split):
        t = frame_index(dataset.record(still.image_id).image_path)
        if from_following:
            idx = list(range(t + n_frames - 1, t, -1))
        else:
            idx = list(range(t - n_frames + 1, t))
        valid = [i for i in idx if 0 <= i < len(path) and path[i]["pass"] == path[t]["pass"]]
        if len(valid) != len(idx):
            raise SequencingError(
                f"annotated frame {still.image_id} has fewer than {n_frames - 1} usable "
                f"{'following' if from_following else 'preceding'} frames in its pass"
            )
        context = [read_image(video_dir / f"frame_{i:06d}.png") for i in idx]
        lam, gam = path[t].get("direction", (1, 1))
        direction = (-lam, -gam) if from_following else (lam, gam)
        seq = assemble_real_sequence(context, still, n_frames, direction)
        for frame, i in zip(seq.frames, idx + [t]):
            frame.crop_origin = (path[i]["x"], path[i]["y"])
        seqs.append(seq)
    return seqs


# --- sequence directories ---------------------------------------------------


def write_sequence_dir(
    seq: FrameSequence, out_dir: str | Path, seed: Optional[int] = None, template: SequencingTemplate | None = None
) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(seq.frames):
        write_image(out_dir / f"frame_{i:04d}.png", frame.image)
        if frame.mask is not None:
            write_mask(out_dir / f"mask_{i:04d}.png", frame.mask)
    h, w = seq.crop_size
    meta = {
        "source_image_id": seq.source_image_id,
        "N": len(seq),
        "direction": list(seq.direction),
        "crop_size": [w, h],
        "origins": [list(f.crop_origin) for f in seq.frames],
        "fully_labelled": seq.fully_labelled,
        "seed": seed,
    }
    if template is not None:
        meta["start"] = list(template.start)
        meta["clamped"] = template.clamped
    (out_dir / "sequence.meta").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")


def read_sequence_meta(seq_dir: str | Path) -> dict:
    return json.loads((Path(seq_dir) / "sequence.meta").read_text(encoding="utf-8"))


def read_sequence_dir(seq_dir: str | Path) -> FrameSequence:
    seq_dir = Path(seq_dir)
    meta = read_sequence_meta(seq_dir)
    frames = []
    for i, origin in enumerate(meta["origins"]):
        mask_path = seq_dir / f"mask_{i:04d}.png"
        frames.append(
            Frame(
                image=read_image(seq_dir / f"frame_{i:04d}.png"),
                mask=read_mask(mask_path) if mask_path.exists() else None,
                crop_origin=tuple(origin),
            )
        )
    return FrameSequence(
        frames, bool(meta["fully_labelled"]), tuple(meta["direction"]), meta["source_image_id"]
    )


def replay_sequence(still: AnnotatedStill, meta: dict) -> FrameSequence:
    """Regenerate a virtual sequence from the origins recorded in its ``sequence.meta``."""
    w, h = meta["crop_size"]
    origins = tuple(tuple(o) for o in meta["origins"])
    template = SequencingTemplate(
        n_frames=len(origins),
        crop_w=w,
        crop_h=h,
        start=origins[0],
        direction=tuple(meta["direction"]),
        origins=origins,
        image_size=(still.width_px, still.height_px),
    )
    return generate_virtual_sequence(still, template)
