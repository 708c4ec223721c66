"""Shared fixtures and the ``--runslow`` switch."""

import numpy as np
import pytest

from pychangen.models.rsdit import DenoiserConfig, RSDiT
from pychangen.scene import SemanticMask, instances_from_semantic


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run desk-scale experiments marked slow")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale experiment, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def two_squares():
    """8x8 scene with two 3x3 class-1 squares and one 2x2 class-2 square."""
    data = np.zeros((8, 8), dtype=np.int64)
    data[0:3, 0:3] = 1
    data[4:7, 4:7] = 1
    data[0:2, 6:8] = 2
    mask = SemanticMask(data, num_classes=3)
    return mask, instances_from_semantic(mask)


@pytest.fixture
def tiny_denoiser_config():
    return DenoiserConfig(patch_size=2, hidden_dim=32, depth=2, num_heads=2, window_size=4,
                          global_attention_period=2, condition_channels=1)


@pytest.fixture
def tiny_denoiser(tiny_denoiser_config):
    import torch

    torch.manual_seed(0)
    return RSDiT(tiny_denoiser_config).eval()


@pytest.fixture(scope="session")
def semantic_checkpoint(tmp_path_factory):
    """Untrained two-class RS-DiT saved under a short linear schedule."""
    import torch

    from pychangen.diffusion import NoiseSchedule
    from pychangen.training import save_checkpoint

    config = DenoiserConfig(patch_size=2, hidden_dim=32, depth=2, num_heads=2, window_size=4,
                            global_attention_period=2, condition_channels=2)
    torch.manual_seed(0)
    path = tmp_path_factory.mktemp("ckpt") / "denoiser.pt"
    save_checkpoint(path, RSDiT(config), NoiseSchedule.linear(100))
    return path


@pytest.fixture(scope="session")
def trained_checkpoint(tmp_path_factory):
    """Two-class RS-DiT trained briefly on 16x16 procedural scenes; slow tests only."""
    from pychangen.diffusion import NoiseSchedule
    from pychangen.procedural import SceneSpec
    from pychangen.training import TrainConfig, train_denoiser

    config = DenoiserConfig(patch_size=2, hidden_dim=32, depth=2, num_heads=2, window_size=4,
                            global_attention_period=2, condition_channels=2)
    scenes = SceneSpec(height=16, width=16, num_classes=2, object_count_range=(1, 3),
                       object_size_range=(3, 6))
    path = tmp_path_factory.mktemp("trained") / "denoiser.pt"
    train_denoiser(config, scenes, TrainConfig(steps=600, batch_size=8, learning_rate=1e-3),
                   NoiseSchedule.linear(), checkpoint_path=path)
    return path
