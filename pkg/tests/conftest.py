import numpy as np
import pytest

from unitcap.model import ModelConfig


@pytest.fixture
def tiny_config() -> ModelConfig:
    """Smallest useful model: fast enough for per-entry finite differences."""
    return ModelConfig(
        d_model=8,
        n_layers=1,
        n_heads=2,
        ff_dim=16,
        max_grid_h=2,
        max_grid_w=2,
        max_unit_len=6,
        unit_vocab=5,
        text_vocab=4,
        image_unit_vocab=7,
        seed=0,
    )


@pytest.fixture
def tiny_batch():
    grid_a = np.array([1, 2, 3, 4])
    grid_b = np.array([0, 5, 6, 2])
    return [(grid_a, np.array([0, 2, 4])), (grid_b, np.array([1, 3]))]
