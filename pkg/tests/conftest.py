import numpy as np
import pytest
import torch

torch.set_num_threads(1)

DTYPE = torch.float64


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tensor(arr):
    return torch.as_tensor(np.asarray(arr), dtype=DTYPE)


def identity_camera(focal=100.0, cx=0.0, cy=0.0, depth_min=1.0, depth_max=1e6):
    from attnmvs.geometry import Camera
    k = np.array([[focal, 0.0, cx], [0.0, focal, cy], [0.0, 0.0, 1.0]])
    return Camera(k, np.eye(3), np.zeros(3), depth_min, depth_max)


def translated_camera(base, offset):
    from attnmvs.geometry import Camera
    return Camera(base.intrinsics, base.rotation,
                  base.translation + np.asarray(offset, dtype=np.float64),
                  base.depth_min, base.depth_max)
