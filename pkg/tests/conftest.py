import pytest
from loguru import logger

import bustop.config
from bustop.config import PipelineConfig
from bustop.synth import SynthConfig, gen_route, gen_trip


@pytest.fixture(autouse=True)
def setup_config(monkeypatch):
    """Set a default CONFIG before each test, isolated from the environment."""
    monkeypatch.delenv("BUSTOP_SEED", raising=False)
    config = PipelineConfig()
    bustop.config.CONFIG = config

    yield config

    bustop.config.CONFIG = None


@pytest.fixture(autouse=True)
def disable_file_logging(monkeypatch):
    """Prevent logger.add() from creating file handlers during tests."""
    original_add = logger.add

    def mock_add(sink, **kwargs):
        # Only allow non-file sinks (like sys.stderr which is the default)
        if hasattr(sink, "__fspath__") or isinstance(sink, (str, bytes)):
            return None
        return original_add(sink, **kwargs)

    monkeypatch.setattr(logger, "add", mock_add)
    yield


@pytest.fixture(scope="session")
def small_synth():
    """A small exact-mode route: 2 stays per type, one site each."""
    return SynthConfig(seed=11, stays_per_type=2, sites_per_type=1, exact=True)


@pytest.fixture(scope="session")
def small_route(small_synth):
    return gen_route(small_synth)


@pytest.fixture(scope="session")
def small_trip(small_route, small_synth):
    """First generated trip (trace, manifest stays)."""
    return gen_trip(small_route, small_synth, 0)
