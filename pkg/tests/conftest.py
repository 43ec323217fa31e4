"""Shared fixtures: small synthetic scenes reused across test modules."""

import numpy as np
import pytest
from hypothesis import settings

from semba.synthscene import SceneConfig, gen_scene

settings.register_profile("default", deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def clean_bundle():
    """Noise-free, dynamics-free scene; ground truth is the exact optimum."""
    return gen_scene(SceneConfig(num_keyframes=5, height=24, width=32, seed=11))


@pytest.fixture(scope="session")
def perturbed_bundle():
    """Same scene with pose noise on the initial state."""
    return gen_scene(SceneConfig(num_keyframes=5, height=24, width=32,
                                 pose_sigma=0.01, seed=11))


@pytest.fixture(scope="session")
def dynamic_bundle():
    """20% dynamic pixels, 5 px motion, fully decorrelated embeddings."""
    return gen_scene(SceneConfig(num_keyframes=5, height=24, width=32, pose_sigma=0.01,
                                 dynamic_fraction=0.2, dynamic_motion_px=5.0,
                                 embedding_decorrelation=1.0, seed=11))


@pytest.fixture
def rng():
    return np.random.default_rng(42)
