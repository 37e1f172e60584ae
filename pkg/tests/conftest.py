import numpy as np
import pytest

from virtual_temporal.core import AnnotatedStill, SceneConfig
from virtual_temporal.synthdata import synthesize

# small scene with the same structure as the defaults: 3 train passes, 1 valid, 1 eval
TINY_SCENE = SceneConfig(
    canvas_width=160,
    canvas_height=400,
    frame_width=96,
    frame_height=64,
    objects_per_class=(56, 50),
    object_size=(4, 9),
    video_length=300,
    passes=5,
    annotation_stride=10,
    mu_w=0.5,
    sigma_w=0.25,
    mu_h=0.12,
    sigma_h=0.16,
)


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_ds")
    synthesize(TINY_SCENE, seed=3, out_dir=out)
    return out


def random_still(rng, h=48, w=64, num_classes=3, image_id="s"):
    image = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
    mask = rng.integers(0, num_classes, size=(h, w)).astype(np.uint8)
    return AnnotatedStill(image_id, image, mask)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
