"""Configuration for the pytest test suite."""

from collections.abc import Iterator

import numpy as np
import pytest

from chaoscope import instrumentation
from chaoscope.dynsys import HenonMap, LinearContraction, LogisticControl, LogisticMap, Lorenz, Pointmass
from chaoscope.policy import PolicyParams, mlp_policy


@pytest.fixture(autouse=True)
def _reset_instrumentation() -> Iterator[None]:
    """Leave logfire unconfigured between tests."""
    yield
    instrumentation._configured = False


@pytest.fixture(autouse=True)
def _isolated_settings(monkeypatch: pytest.MonkeyPatch, tmp_path_factory: pytest.TempPathFactory) -> None:
    """Keep CHAOSCOPE_* variables and .env files of the host out of the tests."""
    monkeypatch.chdir(tmp_path_factory.mktemp("cwd"))
    for name in ("CHAOSCOPE_OUT_DIR", "CHAOSCOPE_LOG_LEVEL", "CHAOSCOPE_LOG_FILE", "CHAOSCOPE_WORKERS", "CHAOSCOPE_OTEL_ENABLED"):
        monkeypatch.delenv(name, raising=False)


@pytest.fixture
def henon() -> HenonMap:
    """Classic Hénon map."""
    return HenonMap()


@pytest.fixture
def logistic() -> LogisticMap:
    """Logistic map with the growth rate as action."""
    return LogisticMap()


@pytest.fixture
def logistic_control() -> LogisticControl:
    """Logistic map with the band reward."""
    return LogisticControl()


@pytest.fixture
def lorenz() -> Lorenz:
    """Lorenz system with the classic parameters."""
    return Lorenz()


@pytest.fixture
def frictionless() -> Pointmass:
    """Point mass without damping."""
    return Pointmass(damping=0.0)


@pytest.fixture
def contraction() -> LinearContraction:
    """Scalar linear contraction s' = 0.9 s."""
    return LinearContraction(rate=0.9)


@pytest.fixture
def small_mlp() -> PolicyParams:
    """Squashed Gaussian MLP for a 2-dimensional state and 1-dimensional action."""
    return mlp_policy(2, 1, (4,), action_low=[-1.0], action_high=[1.0], output_scale=1.0, seed=3)


@pytest.fixture
def rng() -> np.random.Generator:
    """Seeded generator for test data."""
    return np.random.default_rng(12345)
