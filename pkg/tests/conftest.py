import numpy as np
import pandas as pd
import pytest

from app.schemas.synth import SynthConfig
from app.services.geo_service import DEPOSIT_COLUMNS
from app.services.synth_service import synth_service

# Coarse tiles keep generated panels small
FAST_TILE_M = 20_000.0


def deposit_rows(*rows) -> pd.DataFrame:
    """Deposit table from (deposit_id, lat, lon, country, discovery_year, size_class, intervals) tuples"""
    return pd.DataFrame(list(rows), columns=DEPOSIT_COLUMNS)


@pytest.fixture
def rng():
    return np.random.default_rng(20240501)


@pytest.fixture
def tiny_synth_config() -> SynthConfig:
    return SynthConfig(seed=11, n_countries=2, deposits_per_country=12)


@pytest.fixture
def tiny_bundle(tiny_synth_config):
    return synth_service.generate(tiny_synth_config, tile_size_m=FAST_TILE_M)


def random_fe_instance(rng: np.random.Generator, n_obs: int, n_a: int, n_b: int, n_x: int = 3):
    """Two crossed FE dimensions, n_x regressors and an outcome with known slopes"""
    a = rng.integers(0, n_a, n_obs)
    b = rng.integers(0, n_b, n_obs)
    alpha = rng.normal(0, 1, n_a)
    gamma = rng.normal(0, 1, n_b)
    X = rng.normal(0, 1, (n_obs, n_x)) + alpha[a][:, None] * 0.5
    beta = rng.normal(0, 1, n_x)
    y = X @ beta + alpha[a] + gamma[b] + rng.normal(0, 0.3, n_obs)
    return pd.DataFrame({"a": a, "b": b, "y": y, **{f"x{j}": X[:, j] for j in range(n_x)}})
