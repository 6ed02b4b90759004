import pytest
from hypothesis import HealthCheck, settings

from edgevo import synth
from edgevo.synth import DEFAULT_K

settings.register_profile(
    "suite", derandomize=True, max_examples=50,
    suppress_health_check=[HealthCheck.function_scoped_fixture])
settings.load_profile("suite")


@pytest.fixture(scope="session")
def K():
    return DEFAULT_K


@pytest.fixture(scope="session")
def box_scene():
    return synth.textured_box(seed=0)


@pytest.fixture(scope="session")
def dolly_poses():
    return synth.generate_trajectory("dolly", 30, length=1.0)


@pytest.fixture(scope="session")
def box_frames(box_scene, dolly_poses):
    return [synth.render(box_scene, DEFAULT_K, p) for p in dolly_poses[:4]]


@pytest.fixture(scope="session")
def hw_scene():
    return synth.homogeneous_walls(seed=0)


@pytest.fixture(scope="session")
def hw_frames(hw_scene, dolly_poses):
    return [synth.render(hw_scene, DEFAULT_K, p) for p in dolly_poses[:3]]


@pytest.fixture(scope="session")
def lateral_run(box_scene):
    poses = synth.generate_trajectory("lateral", 6, length=0.6)
    frames = [synth.render(box_scene, DEFAULT_K, p) for p in poses]
    return poses, frames
