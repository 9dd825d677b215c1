import numpy as np
import pytest
import torch

from adaptdet.detector import ModelConfig, TwoStageDetector
from adaptdet.scenes import SceneConfig, generate_scene

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def scene_cfg():
    return SceneConfig()


@pytest.fixture(scope="session")
def small_model_cfg():
    # 64x64 images keep forward passes cheap in gradient checks
    return ModelConfig(image_size=64)


@pytest.fixture(scope="session")
def small_scene_cfg():
    return SceneConfig(image_size=64, objects_per_image=(1, 2), max_half_size=12)


@pytest.fixture()
def small_model(small_model_cfg):
    return TwoStageDetector(small_model_cfg, seed=0)


class MemDataset:
    """In-memory labeled dataset with the loader interface."""

    def __init__(self, images):
        self._imgs = images

    def __len__(self):
        return len(self._imgs)

    def image(self, i):
        return self._imgs[i].pixels

    def annotation(self, i):
        return self._imgs[i].boxes, self._imgs[i].class_ids


class MemImages:
    """Images-only counterpart (no annotation accessor by construction)."""

    def __init__(self, images):
        self._imgs = images

    def __len__(self):
        return len(self._imgs)

    def image(self, i):
        return self._imgs[i].pixels


@pytest.fixture(scope="session")
def tiny_source(small_scene_cfg):
    return MemDataset([generate_scene(s, small_scene_cfg) for s in range(8)])


@pytest.fixture(scope="session")
def tiny_target(small_scene_cfg):
    from adaptdet.scenes import apply_shift
    from adaptdet.experiment import default_shift

    shift = default_shift()
    return MemImages(
        [apply_shift(generate_scene(100 + s, small_scene_cfg), shift, seed=s) for s in range(8)]
    )


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-6)
