"""Shared fixtures: micro-scale configs and deterministic token helpers."""

from __future__ import annotations

import numpy as np
import pytest

from retropager import ModelConfig, init_params


@pytest.fixture(scope="session")
def micro_cfg() -> ModelConfig:
    """Smallest config that still exercises multi-head, multi-layer paths."""
    return ModelConfig(vocab_size=32, d_model=16, n_heads=2, n_layers=2,
                      w=8, max_positions=512, seed=0)


@pytest.fixture(scope="session")
def micro_params(micro_cfg):
    return init_params(micro_cfg)


@pytest.fixture(scope="session")
def small_cfg() -> ModelConfig:
    """Three layers so layer-dependent behavior (layer 0 vs later) shows up."""
    return ModelConfig(vocab_size=64, d_model=24, n_heads=3, n_layers=3,
                      w=8, max_positions=1024, seed=1)


@pytest.fixture(scope="session")
def small_params(small_cfg):
    return init_params(small_cfg)


def rand_tokens(cfg: ModelConfig, n: int, seed: int = 0) -> np.ndarray:
    """Random token ids that never collide with the reserved bookmark id."""
    rng = np.random.default_rng(seed)
    return rng.integers(0, cfg.vocab_size - 1, size=n, dtype=np.int64)
