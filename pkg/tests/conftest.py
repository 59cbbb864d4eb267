"""Shared tiny-model builders for the test suite.

Everything here is intentionally small: schedules of three or four
scales on 8px images, widths of 16-32, so whole training runs finish in
seconds while still exercising multi-scale behavior.
"""

import dataclasses

import pytest
import torch

from nextscale.config import ExperimentConfig
from nextscale.data import SyntheticDatasetSpec
from nextscale.generator import Generator, GeneratorConfig, init_params
from nextscale.pyramid import ScaleSchedule
from nextscale.training import TrainConfig


def tiny_experiment(**overrides) -> ExperimentConfig:
    """A fast discrete experiment: 8px blobs, schedule [1,2,4], V=16.

    Dict values for the dataset/model/train keys merge into the tiny
    defaults instead of replacing the whole section.
    """
    base = dict(
        seed=0,
        out_dir="unused",
        schedule=(1, 2, 4),
        supervision="image",
        codebook_images=24,
        feature_width=8,
        eval_every=10_000,
        eval_samples=16,
        knn_k=2,
        dataset=SyntheticDatasetSpec(side=8, channels=1, classes=2, size=64, seed=0),
        model=GeneratorConfig(depth=2, width=32, heads=2, vocab=16, latent_dim=4, classes=2),
        train=TrainConfig(steps=2, batch_size=4, seed=0),
    )
    for key, value in overrides.items():
        if isinstance(value, dict):
            base[key] = dataclasses.replace(base[key], **value)
        else:
            base[key] = value
    return ExperimentConfig(**base).validate()


def tiny_model(schedule=(1, 2, 4), seed=0, **config_overrides) -> Generator:
    cfg_kwargs = dict(depth=2, width=32, heads=2, vocab=16, latent_dim=4, classes=2)
    cfg_kwargs.update(config_overrides)
    cfg = GeneratorConfig(**cfg_kwargs)
    return init_params(Generator(cfg, ScaleSchedule(sides=tuple(schedule))), seed=seed)


def random_latent_pyramid(schedule, latent_dim, batch, seed=0):
    from nextscale.pyramid import LatentPyramid
    from nextscale.rng import torch_stream

    gen = torch_stream(seed, "test/pyramid")
    sched = ScaleSchedule(sides=tuple(schedule))
    maps = [
        torch.randn(batch, h, h, latent_dim, generator=gen)
        for h in sched.sides
    ]
    return LatentPyramid(schedule=sched, maps=maps)


@pytest.fixture
def tmp_run_dir(tmp_path):
    return str(tmp_path / "run")
