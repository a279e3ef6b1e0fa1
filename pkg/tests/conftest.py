"""
Shared pytest fixtures and configuration for the SCSA engine tests.

This module provides seeded random generators, small random feature maps,
default configurations and a tiny synthetic dataset, plus the --run-slow
switch for the multi-seed training and wall-clock checks.
"""

import numpy as np
import pytest

from models import (
    BackboneSpec,
    PcsaConfig,
    ScsaConfig,
    SmsaConfig,
    SyntheticDatasetSpec,
    TrainSpec,
)
from tensor import Tensor


# ============================================================================
# SLOW TEST SWITCH
# ============================================================================

def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False,
                     help="run tests marked slow (multi-seed training, wall-clock ratios)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="slow: pass --run-slow to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def _no_env_overrides(monkeypatch):
    """Tests never inherit SCSA_SEED / SCSA_DEBUG_CHECKS from the shell."""
    monkeypatch.delenv("SCSA_SEED", raising=False)
    monkeypatch.delenv("SCSA_DEBUG_CHECKS", raising=False)


# ============================================================================
# RANDOM STATE AND TENSORS
# ============================================================================

@pytest.fixture
def rng():
    """Seeded generator; every test gets a fresh one."""
    return np.random.default_rng(1234)


@pytest.fixture
def feature_map(rng):
    """Random [2, 8, 6, 5] map: K=4 splits into width-2 sub-features."""
    return Tensor(rng.standard_normal((2, 8, 6, 5)))


@pytest.fixture
def square_map(rng):
    """Random [2, 8, 12, 12] map, the end-to-end SCSA check shape."""
    return Tensor(rng.standard_normal((2, 8, 12, 12)))


@pytest.fixture
def constant_map():
    """Constant [2, 8, 9, 9] map filled with 1.5."""
    return Tensor(np.full((2, 8, 9, 9), 1.5))


# ============================================================================
# CONFIGURATION FIXTURES
# ============================================================================

@pytest.fixture
def smsa_cfg():
    return SmsaConfig()


@pytest.fixture
def pcsa_cfg():
    return PcsaConfig()


@pytest.fixture
def scsa_cfg():
    return ScsaConfig()


@pytest.fixture
def tiny_dataset_spec():
    """Four classes, 10 samples each, 1x16x16 images."""
    return SyntheticDatasetSpec(
        seed=7,
        samples_per_class=10,
        image_size=(1, 16, 16),
        blob_scales=(1.0, 1.5, 2.5, 3.5),
        noise_sigma=0.05,
    )


@pytest.fixture
def tiny_backbone():
    """Single-channel input, one block per stage, widths 8 and 16."""
    return BackboneSpec(in_channels=1, stem_channels=8, stage_channels=(8, 16), blocks_per_stage=1)


@pytest.fixture
def short_train_spec():
    return TrainSpec(epochs=2, batch_size=8, milestones=(1,))
