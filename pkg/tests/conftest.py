import numpy as np
import pytest
import torch

from objerase.denoiser import DiTConfig, ModelConfig, build_model
from objerase.synth import SceneSpec, generate_pair


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def shadow_pair():
    """Small shadow scene whose effect region is disjoint from the object."""
    spec = SceneSpec(
        resolution=(32, 32),
        frames=4,
        object_kind="square",
        start=(8.0, 8.0),
        velocity=(1.0, 1.0),
        object_size=3,
        side_effect="shadow",
        shadow_offset=(8, 8),  # > 2*object_size: shadow clear of the object
        shadow_opacity=0.5,
        background="flat",
        seed=5,
    )
    return generate_pair(spec)


@pytest.fixture(scope="session")
def tiny_model():
    """Small model on 16x16/2-frame clips; under 50k parameters."""
    cfg = ModelConfig(
        dit=DiTConfig(depth=2, hidden=24, heads=2, patch=4),
        cond_dim=16,
        cond_patch=4,
        teacher_dim=16,
        teacher_patch=4,
    )
    return build_model(cfg, seed=0)


def random_video(rng, frames=3, size=(16, 16)):
    from objerase.video import VideoTensor

    data = rng.random((3, frames, *size), dtype=np.float32)
    return VideoTensor(torch.from_numpy(data))


def random_mask(rng, frames=3, size=(16, 16), p=0.3):
    from objerase.video import MaskTensor

    data = (rng.random((1, frames, *size)) < p).astype(np.float32)
    return MaskTensor(torch.from_numpy(data))
