"""Shared fixtures and helpers for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from multimod.data import Sample
from multimod.model import ModalitySpec, ModelConfig, init_model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tiny_config(**overrides) -> ModelConfig:
    """Smallest bimodal config that exercises every code path."""
    kw = dict(
        modalities=[ModalitySpec("color", 3), ModalitySpec("height", 1)],
        num_classes=4,
        widths=(4, 6, 8),
        latent=3,
        fused=6,
    )
    kw.update(overrides)
    return ModelConfig(**kw)


def tiny_model(seed: int = 0, **overrides):
    cfg = tiny_config(**overrides)
    return cfg, init_model(cfg, np.random.default_rng(seed))


def tiny_inputs(rng, cfg: ModelConfig, n: int = 2, size: int = 32):
    return {
        m.name: rng.standard_normal((n, m.channels, size, size)).astype(np.float32)
        for m in cfg.modalities
    }


def random_sample(rng, num_classes: int = 4, size: int = 32) -> Sample:
    return Sample(
        modalities={
            "color": rng.standard_normal((3, size, size)).astype(np.float32),
            "height": rng.standard_normal((1, size, size)).astype(np.float32),
        },
        labels=rng.integers(0, num_classes, (size, size)).astype(np.int64),
        valid_mask=np.ones((size, size), dtype=bool),
    )
