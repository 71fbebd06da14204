import numpy as np
import pytest

from data import default_style_specs, generate_synthetic
from model import ArchConfig
from training import CurriculumSchedule, TrainConfig


def tiny_arch(**overrides) -> ArchConfig:
    fields = dict(
        base_channels=2,
        n_res_blocks=1,
        transformer={"layers": 1, "heads": 2, "model_dim": 8, "ff_dim": 8},
    )
    fields.update(overrides)
    return ArchConfig(**fields)


def tiny_train_config(**overrides) -> TrainConfig:
    fields = dict(
        epochs=2,
        steps_per_epoch=2,
        batch_size=2,
        seed=11,
        schedule=CurriculumSchedule([(0, 16), (1, 32)]),
    )
    fields.update(overrides)
    return TrainConfig(**fields)


@pytest.fixture(scope="session")
def tiny_domains():
    """每个风格 3 段 x 2 秒（60 帧），带音乐。"""
    spec_x, spec_y = default_style_specs(3)
    return generate_synthetic(spec_x, spec_y, n_clips=3, clip_seconds=2.0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
