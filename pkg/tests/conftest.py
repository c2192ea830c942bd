import logging

import numpy as np
import pytest

from mvrestore import synth
from mvrestore.geometry import CameraPose, Intrinsics
from mvrestore.ingest import PosedImage


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.WARNING)


def make_image(id=0, pose=None, K=None, depth=None, image=None, name=None):
    """PosedImage with sensible defaults: identity pose, 8x6 camera, depth 2 everywhere."""
    K = K or Intrinsics(10.0, 10.0, 4.0, 3.0, 8, 6)
    pose = pose or CameraPose(np.array([1.0, 0, 0, 0]), np.zeros(3))
    h, w = K.shape
    if depth is None:
        depth = np.full((h, w), 2.0, dtype=np.float32)
    if image is None:
        image = (np.arange(h * w * 3) % 256).astype(np.uint8).reshape(h, w, 3)
    return PosedImage(id=id, name=name or f"im{id:03d}", image=image, pose=pose, intrinsics=K, depth=depth)


def random_pose(rng) -> CameraPose:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    return CameraPose(q, rng.normal(size=3))


@pytest.fixture(scope="session")
def two_plane_scene():
    return synth.two_plane()


@pytest.fixture(scope="session")
def two_plane_views(two_plane_scene):
    return synth.render_all(two_plane_scene)


@pytest.fixture(scope="session")
def small_corridor_scene():
    return synth.corridor(n_views=5, width=48, height=36, focal=40.0, far=3.0, noise_sigma=0.0)


@pytest.fixture(scope="session")
def small_corridor_views(small_corridor_scene):
    return synth.render_all(small_corridor_scene)
