"""Procedural stand-in for a sparsely annotated agricultural video dataset.

A textured canvas is populated with class-labelled blobs; a camera window then translates over
it with Gaussian steps. Because the scene is static, every frame's ground truth is an exact crop
of the canvas mask.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import (
    DEFAULT_PALETTE,
    ManifestRecord,
    MotionModel,
    SceneConfig,
    format_manifest,
    write_image,
    write_mask,
    write_palette,
)

PLACEMENT_RETRIES = 400
MAX_OVERLAP = 0.35

# per-class (hue range in degrees, saturation range, value range)
CLASS_COLORS = {
    1: ((85.0, 135.0), (0.45, 0.85), (0.45, 0.85)),
    2: ((60.0, 105.0), (0.40, 0.80), (0.40, 0.80)),
}


class PlacementError(RuntimeError):
    pass


@dataclass
class SceneObject:
    class_id: int
    center: tuple[float, float]  # (x, y)
    parts: list[tuple[float, float, float, float, float]]  # (dx, dy, a, b, angle) ellipses
    hsv: tuple[float, float, float] = (110.0, 0.6, 0.6)

    def bbox(self) -> tuple[int, int, int, int]:
        cx, cy = self.center
        r = max(math.hypot(dx, dy) + max(a, b) for dx, dy, a, b, _ in self.parts)
        return int(math.floor(cx - r)), int(math.floor(cy - r)), int(math.ceil(cx + r)), int(math.ceil(cy + r))

    def coverage(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        inside = np.zeros(np.broadcast(xs, ys).shape, dtype=bool)
        for dx, dy, a, b, ang in self.parts:
            px = xs - (self.center[0] + dx)
            py = ys - (self.center[1] + dy)
            c, s = math.cos(ang), math.sin(ang)
            u = (c * px + s * py) / a
            v = (-s * px + c * py) / b
            inside |= u * u + v * v <= 1.0
        return inside


def hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Vectorised HSV (hue in degrees) to float RGB in [0, 1]."""
    h = np.mod(h, 360.0) / 60.0
    c = v * s
    x = c * (1 - np.abs(np.mod(h, 2) - 1))
    m = v - c
    i = np.floor(h).astype(int) % 6
    zeros = np.zeros_like(c)
    r = np.choose(i, [c, x, zeros, zeros, x, c])
    g = np.choose(i, [x, c, c, x, zeros, zeros])
    b = np.choose(i, [zeros, zeros, x, c, c, x])
    return np.stack([r + m, g + m, b + m], axis=-1)


def value_noise(shape: tuple[int, int], cell: int, rng: np.random.Generator) -> np.ndarray:
    """Smoothly interpolated random lattice in [0, 1]."""
    h, w = shape
    gh, gw = h // cell + 2, w // cell + 2
    lattice = rng.random((gh, gw))
    ys = np.arange(h) / cell
    xs = np.arange(w) / cell
    y0, x0 = ys.astype(int), xs.astype(int)
    fy, fx = ys - y0, xs - x0
    fy = fy * fy * (3 - 2 * fy)
    fx = fx * fx * (3 - 2 * fx)
    a = lattice[y0][:, x0]
    b = lattice[y0][:, x0 + 1]
    c = lattice[y0 + 1][:, x0]
    d = lattice[y0 + 1][:, x0 + 1]
    top = a + (b - a) * fx[None, :]
    bottom = c + (d - c) * fx[None, :]
    return top + (bottom - top) * fy[:, None]


def render_background(shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    h, w = shape
    n = 0.5 * value_noise(shape, 64, rng) + 0.3 * value_noise(shape, 16, rng) + 0.2 * value_noise(shape, 4, rng)
    vegetation = value_noise(shape, 48, rng)
    # soil browns with faint green stubble patches that resemble (but are not) plants
    hue = 30.0 + 60.0 * np.clip(vegetation - 0.45, 0, 1) * 2.0 + 8.0 * (n - 0.5)
    sat = 0.35 + 0.25 * vegetation
    val = 0.25 + 0.45 * n
    return hsv_to_rgb(hue, np.clip(sat, 0, 1), np.clip(val, 0, 1))


def sample_object(
    class_id: int, size_range: tuple[int, int], canvas: tuple[int, int], rng, region=None
) -> SceneObject:
    """Random crop or weed shape placed fully inside `region` (x0, y0, x1, y1; default the canvas)."""
    W, H = canvas
    rx0, ry0, rx1, ry1 = region if region is not None else (0, 0, W, H)
    lo, hi = size_range
    if class_id == 1:
        # crops: compact, round-ish clusters of leaves
        r = rng.uniform(0.6 * hi, hi)
        parts = [(0.0, 0.0, r * rng.uniform(0.7, 1.0), r * rng.uniform(0.7, 1.0), rng.uniform(0, math.pi))]
        for _ in range(int(rng.integers(2, 5))):
            ang = rng.uniform(0, 2 * math.pi)
            d = r * rng.uniform(0.5, 0.9)
            parts.append(
                (d * math.cos(ang), d * math.sin(ang), r * rng.uniform(0.35, 0.6), r * rng.uniform(0.2, 0.35), ang)
            )
    else:
        # weeds: rosettes of narrow leaves radiating from a point
        r = rng.uniform(lo + 0.4 * (hi - lo), hi)
        parts = []
        base = rng.uniform(0, 2 * math.pi)
        n_leaves = int(rng.integers(3, 7))
        for j in range(n_leaves):
            ang = base + 2 * math.pi * j / n_leaves + rng.normal(0, 0.25)
            length = r * rng.uniform(0.35, 0.55)
            parts.append((length * math.cos(ang), length * math.sin(ang), length, length * rng.uniform(0.2, 0.35), ang))
    (h0, h1), (s0, s1), (v0, v1) = CLASS_COLORS.get(class_id, ((0.0, 360.0), (0.4, 0.9), (0.4, 0.9)))
    obj = SceneObject(class_id, (0.0, 0.0), parts, (rng.uniform(h0, h1), rng.uniform(s0, s1), rng.uniform(v0, v1)))
    x0, y0, x1, y1 = obj.bbox()
    if x1 - x0 >= rx1 - rx0 or y1 - y0 >= ry1 - ry0:
        raise PlacementError("object larger than the canvas; reduce object_size")
    obj.center = (rng.uniform(rx0 - x0, rx1 - x1), rng.uniform(ry0 - y0, ry1 - y1))
    return obj


def paint_objects(
    image: np.ndarray, mask: np.ndarray, objects: Sequence[SceneObject], rng: Optional[np.random.Generator] = None
) -> None:
    """Paint objects in order (later ones occlude earlier ones); updates image and mask in place.

    `image` is float RGB in [0, 1].
    """
    H, W = mask.shape
    rng = rng or np.random.default_rng(0)
    for obj in objects:
        x0, y0, x1, y1 = obj.bbox()
        x0, y0, x1, y1 = max(x0, 0), max(y0, 0), min(x1 + 1, W), min(y1 + 1, H)
        if x0 >= x1 or y0 >= y1:
            continue
        ys, xs = np.mgrid[y0:y1, x0:x1]
        inside = obj.coverage(xs + 0.5, ys + 0.5)
        if not inside.any():
            continue
        hue, sat, val = obj.hsv
        shape = inside.shape
        jitter = rng.normal(0.0, 1.0, shape)
        # shade towards the rim so objects read as leaves rather than flat discs
        cx, cy = obj.center
        rim = np.hypot(xs + 0.5 - cx, ys + 0.5 - cy)
        rim = rim / (rim[inside].max() + 1e-6)
        rgb = hsv_to_rgb(
            hue + 6.0 * jitter,
            np.clip(sat + 0.05 * jitter, 0, 1),
            np.clip(val * (1.05 - 0.35 * rim) + 0.04 * jitter, 0, 1),
        )
        region = image[y0:y1, x0:x1]
        region[inside] = rgb[inside]
        mask[y0:y1, x0:x1][inside] = obj.class_id


def render_scene(spec: SceneConfig, seed: int, num_classes: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Canvas image (uint8 RGB) and class mask (background = 0); deterministic per seed."""
    rng = np.random.default_rng(seed)
    W, H = spec.canvas_width, spec.canvas_height
    image = render_background((H, W), rng)
    mask = np.zeros((H, W), dtype=np.uint8)
    counts = list(spec.objects_per_class)[: num_classes - 1]
    objects: list[SceneObject] = []
    occupied = np.zeros((H, W), dtype=bool)
    # stratified placement: each class is dealt round-robin over the camera tiles so every
    # pass (and hence every split) sees about the same class mix
    regions = [None]
    if spec.stratify:
        regions = tile_layout((W, H), spec.passes, (spec.frame_width, spec.frame_height))
    schedule = []
    for c, n in enumerate(counts):
        start = int(rng.integers(len(regions)))
        schedule += [(c + 1, regions[(start + k) % len(regions)]) for k in range(n)]
    order = rng.permutation(len(schedule))
    for class_id, region in (schedule[i] for i in order):
        for _ in range(PLACEMENT_RETRIES):
            obj = sample_object(class_id, spec.object_size, (W, H), rng, region)
            x0, y0, x1, y1 = obj.bbox()
            x0, y0 = max(x0, 0), max(y0, 0)
            ys, xs = np.mgrid[y0 : min(y1 + 1, H), x0 : min(x1 + 1, W)]
            inside = obj.coverage(xs + 0.5, ys + 0.5)
            area = inside.sum()
            if area == 0:
                continue
            overlap = (occupied[ys, xs] & inside).sum() / area
            if overlap <= MAX_OVERLAP:
                occupied[ys[inside], xs[inside]] = True
                objects.append(obj)
                break
        else:
            raise PlacementError(
                f"could not place a class-{class_id} object within {PLACEMENT_RETRIES} attempts; "
                "use fewer or smaller objects"
            )
    paint_objects(image, mask, objects, rng)
    noise = rng.normal(0.0, 0.02, image.shape)
    canvas = np.clip((image + noise) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    return canvas, mask


@dataclass
class VideoClip:
    frames: list[np.ndarray]
    masks: list[np.ndarray]
    path: list[dict] = field(default_factory=list)  # per frame: x, y, dx, dy, direction, pass, clamped

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def any_clamped(self) -> bool:
        return any(p["clamped"] for p in self.path)


def render_video(
    canvas: np.ndarray,
    mask: np.ndarray,
    motion: MotionModel,
    frame_size: tuple[int, int],
    length: int,
    seed: int,
    start: Optional[tuple[int, int]] = None,
    direction: tuple[int, int] = (1, 1),
    bounds: Optional[tuple[int, int, int, int]] = None,
    pass_index: int = 0,
) -> VideoClip:
    """Camera window of `frame_size` (w, h) translating with N(mu, sigma^2) steps per frame.

    The window is kept inside `bounds` = (x0, y0, x1, y1) (default: the whole canvas); frames
    where it had to be clamped are flagged in the path.
    """
    H, W = mask.shape
    fw, fh = frame_size
    x0, y0, x1, y1 = bounds if bounds is not None else (0, 0, W, H)
    if fw > x1 - x0 or fh > y1 - y0:
        raise ValueError(f"frame {fw}x{fh} does not fit in the camera bounds {bounds or (W, H)}")
    if length < 1:
        raise ValueError("video length must be >= 1")
    rng = np.random.default_rng(seed)
    lam, gam = direction
    if start is None:
        start = (x0 if lam > 0 else x1 - fw, y0 if gam > 0 else y1 - fh)
    px, py = float(start[0]), float(start[1])
    frames, masks, path = [], [], []
    prev = None
    for t in range(length):
        if t > 0:
            px += lam * rng.normal(motion.mu_w, motion.sigma_w)
            py += gam * rng.normal(motion.mu_h, motion.sigma_h)
        x, y = int(round(px)), int(round(py))
        cx = min(max(x, x0), x1 - fw)
        cy = min(max(y, y0), y1 - fh)
        clamped = (cx, cy) != (x, y)
        px, py = (float(cx), float(cy)) if clamped else (px, py)
        dx, dy = (cx - prev[0], cy - prev[1]) if prev else (0, 0)
        frames.append(canvas[cy : cy + fh, cx : cx + fw].copy())
        masks.append(mask[cy : cy + fh, cx : cx + fw].copy())
        path.append(
            {"t": t, "x": cx, "y": cy, "dx": dx, "dy": dy, "direction": [lam, gam], "pass": pass_index, "clamped": clamped}
        )
        prev = (cx, cy)
    return VideoClip(frames, masks, path)


def tile_layout(
    canvas: tuple[int, int], passes: int, frame_size: tuple[int, int]
) -> list[tuple[int, int, int, int]]:
    """Disjoint rectangles (x0, y0, x1, y1), one per camera pass, laid out row-major.

    Picks the grid that leaves the frame the most room to travel inside each tile.
    """
    W, H = canvas
    fw, fh = frame_size
    best = None
    for rows in range(1, passes + 1):
        cols = int(math.ceil(passes / rows))
        room = min(W // cols - fw, H // rows - fh)
        if room >= 0 and (best is None or room > best[0]):
            best = (room, rows, cols)
    if best is None:
        raise ValueError(f"cannot fit {passes} disjoint {fw}x{fh} camera tiles on a {W}x{H} canvas")
    _, rows, cols = best
    tw, th = W // cols, H // rows
    return [((p % cols) * tw, (p // cols) * th, (p % cols + 1) * tw, (p // cols + 1) * th) for p in range(passes)]


def render_passes(canvas: np.ndarray, mask: np.ndarray, spec: SceneConfig, seed: int) -> VideoClip:
    """One camera pass per tile, alternating horizontal direction; concatenated into one video."""
    H, W = mask.shape
    motion = MotionModel(spec.mu_w, spec.sigma_w, spec.mu_h, spec.sigma_h)
    per_pass = spec.video_length // spec.passes
    clip = VideoClip([], [], [])
    offset = 0
    for p, tile in enumerate(tile_layout((W, H), spec.passes, (spec.frame_width, spec.frame_height))):
        length = per_pass if p < spec.passes - 1 else spec.video_length - per_pass * (spec.passes - 1)
        part = render_video(
            canvas,
            mask,
            motion,
            (spec.frame_width, spec.frame_height),
            length,
            seed=seed * 1000 + p,
            direction=(1 if p % 2 == 0 else -1, 1),
            bounds=tile,
            pass_index=p,
        )
        for entry in part.path:
            entry["t"] += offset
        offset += length
        clip.frames += part.frames
        clip.masks += part.masks
        clip.path += part.path
    return clip


def windows_overlap(a: dict, b: dict, frame_size: tuple[int, int]) -> bool:
    fw, fh = frame_size
    return a["x"] < b["x"] + fw and b["x"] < a["x"] + fw and a["y"] < b["y"] + fh and b["y"] < a["y"] + fh


# annotated frames keep this many frames of the same pass before them (and LEAD - 1 after),
# enough for real sequences of up to LEAD + 1 frames in either direction
LEAD = 5


def annotated_indices(clip: VideoClip, stride: int) -> list[int]:
    """Every `stride`-th frame of each pass, starting max(stride // 2, LEAD) frames into the pass."""
    starts: dict[int, int] = {}
    ends: dict[int, int] = {}
    for i, entry in enumerate(clip.path):
        starts.setdefault(entry["pass"], i)
        ends[entry["pass"]] = i
    first = max(stride // 2, LEAD)
    out = []
    for i, entry in enumerate(clip.path):
        k = i - starts[entry["pass"]]
        if k >= first and (k - first) % stride == 0 and ends[entry["pass"]] - i >= LEAD - 1:
            out.append(i)
    return out


def assign_splits(
    clip: VideoClip, indices: Sequence[int], split_passes: Sequence[int], frame_size: tuple[int, int]
) -> dict[int, str]:
    """Assign annotated frames to train/valid/eval by contiguous segments of the video.

    With several passes the segments are whole passes (`split_passes` counts per split); a
    single-pass video is cut 60/20/20. Annotated frames whose window overlaps an annotated window
    of another split are dropped.
    """
    names = ("train", "valid", "eval")
    n_passes = len({e["pass"] for e in clip.path})
    if n_passes > 1:
        bounds = np.cumsum(split_passes)
        if bounds[-1] != n_passes:
            raise ValueError(f"split_passes {tuple(split_passes)} does not add up to {n_passes} passes")
        which = lambda i: names[int(np.searchsorted(bounds, clip.path[i]["pass"], side="right"))]
    else:
        cut1, cut2 = int(0.6 * len(clip)), int(0.8 * len(clip))
        which = lambda i: "train" if i < cut1 else ("valid" if i < cut2 else "eval")
    assigned = {i: which(i) for i in indices}
    kept = {}
    for i, split in assigned.items():
        clash = any(
            other != split and windows_overlap(clip.path[i], clip.path[j], frame_size)
            for j, other in assigned.items()
        )
        if not clash:
            kept[i] = split
    return kept


def export_dataset(
    clip: VideoClip,
    stride: int,
    out_dir: str | Path,
    split_passes: Sequence[int] = (3, 1, 1),
    meta: Optional[dict] = None,
    holdout_stride: int = 0,
) -> list[ManifestRecord]:
    """Write the video, sparse annotations and a manifest; returns the manifest records.

    `holdout_stride` (if set) annotates the valid/eval segments more densely than train.
    """
    if stride < 1 or holdout_stride < 0:
        raise ValueError("annotation stride must be >= 1")
    out_dir = Path(out_dir)
    (out_dir / "video").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    fh, fw = clip.frames[0].shape[:2]
    for i, frame in enumerate(clip.frames):
        write_image(out_dir / "video" / f"frame_{i:06d}.png", frame)
    path_doc = {"frame_size": [fw, fh], "frames": clip.path}
    path_doc.update(meta or {})
    (out_dir / "video" / "path.meta").write_text(json.dumps(path_doc, indent=1) + "\n", encoding="utf-8")

    sparse = set(annotated_indices(clip, stride))
    dense = set(annotated_indices(clip, holdout_stride)) if holdout_stride else sparse
    splits = assign_splits(clip, sorted(sparse | dense), split_passes, (fw, fh))
    splits = {i: s for i, s in splits.items() if i in (sparse if s == "train" else dense)}
    records = []
    for i, split in sorted(splits.items()):
        name = f"frame_{i:06d}"
        write_mask(out_dir / "masks" / f"{name}.png", clip.masks[i])
        records.append(ManifestRecord(name, f"video/{name}.png", f"masks/{name}.png", split))
    (out_dir / "manifest.tsv").write_text(format_manifest(records), encoding="utf-8")
    write_palette(out_dir / "palette.txt", DEFAULT_PALETTE)
    return records


def synthesize(spec: SceneConfig, seed: int, out_dir: str | Path, num_classes: int = 3) -> list[ManifestRecord]:
    canvas, mask = render_scene(spec, seed, num_classes)
    clip = render_passes(canvas, mask, spec, seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_image(out_dir / "canvas.png", canvas)
    write_mask(out_dir / "canvas_mask.png", mask)
    return export_dataset(
        clip,
        spec.annotation_stride,
        out_dir,
        spec.split_passes,
        meta={"seed": seed, "canvas_size": [spec.canvas_width, spec.canvas_height]},
        holdout_stride=spec.holdout_stride,
    )
