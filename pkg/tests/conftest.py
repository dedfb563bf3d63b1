from __future__ import annotations

import numpy as np
import pytest

from bcdtrain.config import get_settings
from bcdtrain.data import synthetic_blobs
from bcdtrain.operators import Activation
from bcdtrain.state import Form, NetworkSpec


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


@pytest.fixture
def toy_data():
    """16 samples, 4 features, 3 classes."""
    return synthetic_blobs(16, 4, 3, 0.2, seed=3)


@pytest.fixture(autouse=True)
def _fresh_settings(monkeypatch, tmp_path):
    monkeypatch.setenv("BCD_RUNS_DIR", str(tmp_path / "runs"))
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


def toy_spec(form: Form, act: str = "relu", *, dims=(4, 6, 6, 3), bias: bool = False) -> NetworkSpec:
    if form is Form.RESIDUAL:
        dims = (dims[0],) * (len(dims) - 1) + (dims[-1],)
    return NetworkSpec.mlp(dims, Activation.parse(act), residual=form is Form.RESIDUAL, bias=bias)
