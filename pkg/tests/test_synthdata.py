import math

import numpy as np
import pytest

from virtual_temporal.core import MotionModel, SceneConfig, load_dataset
from virtual_temporal.synthdata import (
    SceneObject,
    annotated_indices,
    assign_splits,
    export_dataset,
    paint_objects,
    render_scene,
    render_video,
    tile_layout,
    windows_overlap,
)


def test_zero_objects_all_background():
    _, mask = render_scene(SceneConfig(canvas_width=200, canvas_height=150, objects_per_class=(0, 0), stratify=False), seed=0)
    assert not mask.any()


@pytest.mark.parametrize("r", [6.0, 15.0, 40.0])
def test_disk_area(r):
    mask = np.zeros((128, 128), np.uint8)
    image = np.zeros((128, 128, 3))
    paint_objects(image, mask, [SceneObject(1, (64.0, 64.0), [(0, 0, r, r, 0.0)])])
    assert abs((mask == 1).sum() - math.pi * r * r) <= 0.05 * math.pi * r * r


def test_scene_deterministic_per_seed():
    spec = SceneConfig(canvas_width=300, canvas_height=200, objects_per_class=(5, 4), object_size=(10, 24), stratify=False)
    a, ma = render_scene(spec, seed=4)
    b, mb = render_scene(spec, seed=4)
    c, _ = render_scene(spec, seed=5)
    assert np.array_equal(a, b) and np.array_equal(ma, mb)
    assert not np.array_equal(a, c)
    assert set(np.unique(ma)) <= {0, 1, 2}


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_stratified_scene_balances_classes_over_tiles(seed):
    from conftest import TINY_SCENE

    _, mask = render_scene(TINY_SCENE, seed)
    tiles = tile_layout((TINY_SCENE.canvas_width, TINY_SCENE.canvas_height), TINY_SCENE.passes, (96, 64))
    for c in (1, 2):
        cover = [(mask[y0:y1, x0:x1] == c).mean() for x0, y0, x1, y1 in tiles]
        assert min(cover) > 0 and max(cover) < 2.0 * min(cover)


def _canvas(w=400, h=200):
    rng = np.random.default_rng(0)
    return rng.integers(0, 256, (h, w, 3), dtype=np.uint8), rng.integers(0, 3, (h, w)).astype(np.uint8)


def test_sigma_zero_path():
    canvas, mask = _canvas()
    clip = render_video(canvas, mask, MotionModel(5, 0, 1, 0), (64, 48), 20, seed=0, start=(10, 7))
    for t, entry in enumerate(clip.path):
        assert (entry["x"], entry["y"]) == (10 + 5 * t, 7 + t)
    assert not clip.any_clamped


def test_frames_are_canvas_slices():
    canvas, mask = _canvas()
    clip = render_video(canvas, mask, MotionModel(3, 2, 0.5, 1), (64, 48), 40, seed=1)
    for f, m, e in zip(clip.frames, clip.masks, clip.path):
        x, y = e["x"], e["y"]
        assert np.array_equal(f, canvas[y : y + 48, x : x + 64])
        assert np.array_equal(m, mask[y : y + 48, x : x + 64])


def test_single_frame_and_clamping():
    canvas, mask = _canvas()
    one = render_video(canvas, mask, MotionModel(5, 1, 1, 1), (64, 48), 1, seed=0, start=(3, 4))
    assert len(one) == 1 and (one.path[0]["x"], one.path[0]["y"]) == (3, 4)
    long = render_video(canvas, mask, MotionModel(20, 0, 0, 0), (64, 48), 30, seed=0)
    assert long.any_clamped and max(e["x"] for e in long.path) == 400 - 64


def test_stride_ten_over_hundred_frames():
    canvas, mask = _canvas()
    clip = render_video(canvas, mask, MotionModel(2, 1, 0.2, 0.2), (64, 48), 100, seed=0)
    assert len(annotated_indices(clip, 10)) == 10


@pytest.mark.parametrize("stride", [1, 2, 3, 7, 10])
def test_annotated_frames_leave_room_for_real_sequences(stride):
    canvas, mask = _canvas()
    clip = render_video(canvas, mask, MotionModel(2, 1, 0.2, 0.2), (64, 48), 60, seed=0)
    idx = annotated_indices(clip, stride)
    assert idx and min(idx) >= 5 and max(idx) <= 55
    assert all(b - a == stride for a, b in zip(idx, idx[1:]))


def test_holdout_stride_densifies_only_valid_and_eval(tmp_path):
    spec = SceneConfig(canvas_width=480, canvas_height=320, frame_width=96, frame_height=64,
                       object_size=(10, 26), video_length=300, holdout_stride=3)
    from virtual_temporal.synthdata import render_passes
    canvas, mask = render_scene(spec, 0)
    clip = render_passes(canvas, mask, spec, 0)
    sparse = export_dataset(clip, 10, tmp_path / "a")
    dense = export_dataset(clip, 10, tmp_path / "b", holdout_stride=3)
    pick = lambda recs, s: [r.image_id for r in recs if r.split == s]
    assert pick(dense, "train") == pick(sparse, "train")
    for s in ("valid", "eval"):
        assert len(pick(dense, s)) >= 3 * len(pick(sparse, s)) - 3


def test_single_pass_split_has_no_cross_split_overlap(tmp_path):
    canvas, mask = _canvas(1200, 120)
    clip = render_video(canvas, mask, MotionModel(3, 1, 0, 0.3), (64, 48), 300, seed=2)
    idx = annotated_indices(clip, 10)
    splits = assign_splits(clip, idx, (3, 1, 1), (64, 48))
    assert set(splits.values()) == {"train", "valid", "eval"}
    # independent interval-intersection check
    items = sorted(splits.items())
    for i, si in items:
        for j, sj in items:
            if si != sj:
                a, b = clip.path[i], clip.path[j]
                ox = min(a["x"], b["x"]) + 64 > max(a["x"], b["x"])
                oy = min(a["y"], b["y"]) + 48 > max(a["y"], b["y"])
                assert not (ox and oy)
    records = export_dataset(clip, 10, tmp_path)
    ds = load_dataset(tmp_path)
    assert len(ds.stills) == len(records) == len(splits)


def test_tiles_disjoint_and_fit():
    tiles = tile_layout((1200, 800), 5, (256, 192))
    assert len(tiles) == 5
    for a in tiles:
        assert a[2] - a[0] >= 256 and a[3] - a[1] >= 192
        for b in tiles:
            if a != b:
                assert a[2] <= b[0] or b[2] <= a[0] or a[3] <= b[1] or b[3] <= a[1]
    with pytest.raises(ValueError):
        tile_layout((300, 200), 5, (256, 192))


def test_tiny_dataset_passes_are_split_disjointly(tiny_dataset_dir):
    ds = load_dataset(tiny_dataset_dir)
    assert all(len(ds.split(s)) > 0 for s in ("train", "valid", "eval"))
    import json

    path = json.loads((tiny_dataset_dir / "video" / "path.meta").read_text())["frames"]
    pass_of = {r.image_id: path[int(r.image_id.split("_")[1])]["pass"] for r in ds.records}
    by_split = {s: {pass_of[i] for i in ds.splits[s]} for s in ds.splits}
    assert not (by_split["train"] & by_split["valid"]) and not (by_split["valid"] & by_split["eval"])
