"""Shared fixtures: tiny geometries, models and datasets that keep tests fast"""

import os

import numpy as np
import pytest
from loguru import logger

from esim_evaluator import EvaluatorSpec, build_evaluator
from event_core import EventFrame, FrameSequence, Geometry
from event_predictor import ModelSpec, build_predictor
from scene_synth import DatasetConfig, generate_dataset
from spiking_layers import seed_everything


def pytest_collection_modifyitems(config, items):
    if os.getenv("PATTN_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="set PATTN_RUN_SLOW=1 to run desk-scale checks")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def quiet_logs():
    logger.disable("")
    yield
    logger.enable("")


def frame_from(cells, frame_index: int = 0) -> EventFrame:
    return EventFrame(np.asarray(cells, dtype=np.int8), frame_index)


def random_frame(rng: np.random.Generator, height: int, width: int, density: float = 0.2,
                 frame_index: int = 0) -> EventFrame:
    active = rng.random((height, width)) < density
    signs = rng.choice(np.array([1, -1], dtype=np.int8), size=(height, width))
    return EventFrame(np.where(active, signs, 0).astype(np.int8), frame_index)


def random_sequence(seed: int, length: int, height: int = 16, width: int = 16, dt: int = 100) -> FrameSequence:
    rng = np.random.default_rng(seed)
    frames = tuple(random_frame(rng, height, width, frame_index=i) for i in range(length))
    return FrameSequence(frames, dt, Geometry(width, height))


@pytest.fixture
def tiny_dataset_config() -> DatasetConfig:
    return DatasetConfig(
        name="tiny", width=16, height=16, n_sequences=4, sequence_length=8, seed=3,
        n_objects=1, radius=3.0, speed_min=1.0, speed_max=2.0, dt=100,
    )


@pytest.fixture
def tiny_dataset(tiny_dataset_config):
    return generate_dataset(tiny_dataset_config)


@pytest.fixture
def tiny_spec() -> ModelSpec:
    return ModelSpec(width=16, height=16, encoder_channels=[4, 8, 8], residual_blocks=1)


@pytest.fixture
def tiny_predictor(tiny_spec):
    seed_everything(0)
    model = build_predictor(tiny_spec)
    model.eval()
    return model


@pytest.fixture
def tiny_evaluator():
    seed_everything(1)
    model = build_evaluator(EvaluatorSpec(width=16, height=16, channels=(4, 8), time_steps=3))
    model.eval()
    return model
