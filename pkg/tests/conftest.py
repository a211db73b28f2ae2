import numpy as np
import pytest
import torch

from gesttoken.config import desk_profile
from gesttoken.motion_data import synth_generate

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def desk_config():
    return desk_profile()


@pytest.fixture(scope="session")
def desk_corpus(desk_config):
    return synth_generate(desk_config.corpus, seed=7)


@pytest.fixture(scope="session")
def tiny_corpus():
    """Small/fast corpus for CLI and smoke tests."""
    from gesttoken.config import CorpusConfig
    cfg = CorpusConfig(speakers=4, sequences=40, frames=128)
    return synth_generate(cfg, seed=11)


def rand_rotations(n: int, rng: np.random.Generator,
                   max_angle: float = 2.5) -> torch.Tensor:
    """Random rotation blocks with angles bounded away from 0 and pi."""
    from gesttoken.motion_data import rotation_from_axis_angle
    axes = rng.normal(size=(n, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    angles = rng.uniform(0.2, max_angle, size=n)
    mats = np.stack([rotation_from_axis_angle(a, ang)
                     for a, ang in zip(axes, angles)])
    return torch.from_numpy(mats)
