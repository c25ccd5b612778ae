import logging

import numpy as np
import pytest

from pipeline_config import PipelineConfig
from synth_scene import SynthConfig, synth_scene


@pytest.fixture(autouse=True)
def isolated_logs(tmp_path, monkeypatch):
    """Keep log and metrics files out of the working tree."""
    log_dir = tmp_path / "logs"
    monkeypatch.setattr(PipelineConfig, "LOG_DIRECTORY", str(log_dir))
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield log_dir
    # configure_logging replaces the root handlers; undo that between tests
    for handler in root.handlers:
        if handler not in handlers:
            handler.close()
    root.handlers[:] = handlers
    root.setLevel(level)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def random_image(rng):
    """8x8 linear image away from zero so logs stay tame."""
    return rng.uniform(0.05, 1.0, size=(8, 8, 3))


@pytest.fixture
def small_scene():
    return synth_scene(7, 32, 32, SynthConfig(n_regions=3, noise_sigma=0.0, lidar_density=0.5))


@pytest.fixture
def shadow_scene():
    return synth_scene(3, 48, 48, SynthConfig(n_regions=1, shadow=True, noise_sigma=0.0, lidar_density=1.0))


def two_region_image(height=8, width=8, left=0.2, right=0.8):
    img = np.full((height, width, 3), left)
    img[:, width // 2:] = right
    return img
