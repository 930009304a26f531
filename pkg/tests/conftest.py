from __future__ import annotations

import numpy as np
import pytest

from voxatn.cloudio import PointCloud, Space
from voxatn.schemas import AugmentSpec, ClassLabel, ModelConfig, TrainConfig

NO_AUGMENT = AugmentSpec(rotation_copies=1, jitter_sigma=0.0, mirror=False, shift_max=0.0)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def small_model_config() -> ModelConfig:
    return ModelConfig(input_resolution=16, init_seed=3)


def normalized_cloud(points, label=ClassLabel.bona_fide, identity="id", session=0) -> PointCloud:
    return PointCloud(points=np.asarray(points, dtype=np.float64), label=label, identity=identity,
                      space=Space.normalized, session=session)


@pytest.fixture
def toy_clouds() -> list[PointCloud]:
    """Two separable samples: a tiny central blob (bona fide) and a dense corner block (attack)."""
    center = np.full((8, 3), 0.5) + np.linspace(-0.01, 0.01, 8)[:, None]
    g = np.linspace(0.0, 0.24, 6)
    corner = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
    return [
        normalized_cloud(center, ClassLabel.bona_fide, "bona00"),
        normalized_cloud(corner, ClassLabel.silicone_mask, "mask00"),
    ]


@pytest.fixture
def toy_train_config() -> TrainConfig:
    return TrainConfig(batch_size=2, epochs=50, augment=NO_AUGMENT, rng_seed=5, deterministic=True)
