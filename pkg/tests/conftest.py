import numpy as np
import pytest

from peddpg.sim import SimConfig, StreamingEnv

W = 2e6
NOISE = 10 ** (-12.5)  # -95 dBm in watts


def desk_config(**overrides):
    base = dict(num_users=2, num_bs=3, segments_per_video=3, frames_per_segment=10, slots_per_frame=100)
    base.update(overrides)
    return SimConfig(**base)


@pytest.fixture
def desk_env():
    return StreamingEnv(desk_config())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
