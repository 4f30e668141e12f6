import numpy as np
import pytest

from raycal.synth import SynthConfig, default_scene, generate
from raycal.tracer import TraceConfig


def small_config(**kw) -> SynthConfig:
    base = dict(positions=12, seed=3,
                trace=TraceConfig(max_order=2, ray_count=4000, diffuse_samples=40).to_dict())
    base.update(kw)
    return SynthConfig(**base)


@pytest.fixture(scope="session")
def scene():
    return default_scene()


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory, scene):
    """A 12-position synthetic corridor dataset written to disk."""
    out = tmp_path_factory.mktemp("data") / "syn"
    result = generate(scene, small_config(), out)
    return out, result


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
