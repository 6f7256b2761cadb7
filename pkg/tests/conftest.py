import numpy as np
import pytest

from fingerspell.datamodel import Clip, KeypointFrame


def random_keypoint_frame(rng, with_lip=False, lip_dim=8):
    return KeypointFrame(
        left_joints=rng.normal(size=(21, 3)),
        right_joints=rng.normal(size=(21, 3)),
        left_center_2d=rng.uniform(size=2),
        right_center_2d=rng.uniform(size=2),
        lip=rng.normal(size=lip_dim) if with_lip else None,
    )


def random_clip(rng, clip_id="clip", n_frames=10, with_lip=False, lip_dim=8):
    frames = tuple(random_keypoint_frame(rng, with_lip, lip_dim) for _ in range(n_frames))
    return Clip(clip_id=clip_id, fps=25.0, frames=frames)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
