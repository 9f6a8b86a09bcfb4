import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pointreg import SceneConfig, SensorModel, init_model
from pointreg.model import desk_config


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def toy_scene_config(seed: int = 0, max_separation: float = 8.0) -> SceneConfig:
    """Small, fast scene configuration shared by integration tests."""
    return SceneConfig(
        world_extent=24.0,
        num_boxes=10,
        num_cylinders=6,
        num_walls=3,
        sensor=SensorModel(
            max_range=40.0,
            num_fans=24,
            fan_min_deg=-22.0,
            fan_max_deg=3.0,
            azimuth_step_deg=1.5,
        ),
        max_sensor_separation=max_separation,
        noise_sigma=0.01,
        rng_seed=seed,
    )


@pytest.fixture(scope="session")
def desk_model():
    return init_model(desk_config(), seed=11)
