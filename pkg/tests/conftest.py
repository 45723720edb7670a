"""Shared lightweight fixtures for the unit test modules."""

import numpy as np
import pytest

from stylefield import scene_io


@pytest.fixture(scope="session")
def plane_scene():
    spec = scene_io.SynthSpec(geometry="plane", n_views=8, image_size=64)
    return scene_io.synth_scene(spec)


@pytest.fixture(scope="session")
def box_scene():
    spec = scene_io.SynthSpec(geometry="box", texture_seed=5, n_views=8,
                              image_size=64)
    return scene_io.synth_scene(spec)


@pytest.fixture(scope="session")
def small_plane_scene():
    spec = scene_io.SynthSpec(geometry="plane", texture_seed=2, n_views=4,
                              image_size=32)
    return scene_io.synth_scene(spec)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
