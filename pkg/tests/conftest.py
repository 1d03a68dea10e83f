"""Shared fixtures: tiny scenes, splits and untrained model bundles"""
import numpy as np
import pytest
import torch

from src.services.datagen_service import SceneSpec, SplitArrays, generate_sample
from src.services.model_service import TaskModelBundle, build_model

TINY_SIZE = 32
TINY_WIDTH = 4


def make_split(spec: SceneSpec, indices) -> SplitArrays:
    samples = [generate_sample(spec, i) for i in indices]
    return SplitArrays(
        images=torch.stack([torch.from_numpy(s.image).permute(2, 0, 1) for s in samples]).contiguous(),
        labels=torch.tensor([s.class_label for s in samples], dtype=torch.long),
        masks=torch.stack([torch.from_numpy(s.mask.astype(np.int64)) for s in samples]),
        boxes=[list(s.boxes) for s in samples],
        files=[f"images/test_{i:05d}.png" for i in indices],
    )


@pytest.fixture
def tiny_spec() -> SceneSpec:
    return SceneSpec(image_size=TINY_SIZE, rng_seed=7)


@pytest.fixture
def tiny_split(tiny_spec) -> SplitArrays:
    return make_split(tiny_spec, range(6))


@pytest.fixture
def tiny_bundle(tiny_spec) -> TaskModelBundle:
    torch.manual_seed(0)
    c = tiny_spec.num_classes
    return TaskModelBundle.build(
        build_model('cls', c, TINY_WIDTH),
        build_model('det', c, TINY_WIDTH),
        build_model('seg', c, TINY_WIDTH),
        TINY_SIZE,
        holdout={'cls': build_model('cls', c, TINY_WIDTH)},
    )
