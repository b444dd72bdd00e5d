import numpy as np
import pytest

from viofusion.geometry import SE3Pose, so3_exp


def random_rotation(rng: np.random.Generator, max_angle: float = np.pi - 1e-3) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return so3_exp(axis * rng.uniform(0.0, max_angle))


def random_pose(rng: np.random.Generator, trans_scale: float = 5.0) -> SE3Pose:
    return SE3Pose(random_rotation(rng), rng.normal(scale=trans_scale, size=3))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
