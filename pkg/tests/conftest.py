import numpy as np
import pytest
import torch

from agil.data_model import FrameRecord, GazeSample, Trajectory
from agil.pipeline import FeatureStore
from agil.retina import DEFAULT_GEOMETRY
from agil.synthetic_data import SyntheticSpec, generate

# every timing budget assumes a single CPU thread
torch.set_num_threads(1)


def make_trajectory(trial_id="t0", n=6, subject="s1", game="g", seed=0, size=(210, 160),
                    gaze=None, valid=True, actions=None):
    rng = np.random.default_rng(seed)
    h, w = size
    records = []
    for i in range(n):
        img = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
        g = gaze if gaze is not None else (GazeSample(w / 2 + i, h / 2, i * 16.7),)
        a = actions[i] if actions is not None else int(i % 18)
        records.append(FrameRecord(i, img, a, tuple(g), valid))
    return Trajectory(trial_id, subject, game, DEFAULT_GEOMETRY, tuple(records))


@pytest.fixture
def traj_factory():
    return make_trajectory


@pytest.fixture(scope="session")
def dot_trials():
    """The 500-frame moving-dot dataset (seed 0)."""
    return generate(SyntheticSpec(task="dot_gaze", n_frames=500, seed=0))


@pytest.fixture(scope="session")
def small_dot_trials():
    return generate(SyntheticSpec(task="dot_gaze", n_frames=80, seed=3))


@pytest.fixture(scope="session")
def small_disamb_trials():
    return generate(SyntheticSpec(task="disambiguation", n_frames=240, frames_per_trial=60, seed=5))


@pytest.fixture(scope="session")
def store():
    return FeatureStore()
