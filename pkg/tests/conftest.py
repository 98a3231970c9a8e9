import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from app_config import preset  # noqa: E402
from data_io import FeatureCache, SyntheticSpec, generate_synthetic_dataset, iter_annotations, load_manifest  # noqa: E402
from numerics import set_precision  # noqa: E402
from training import build_sample, collate  # noqa: E402
from twinnet import TwinNet  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run the long acceptance experiments")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long acceptance experiment (needs --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def _precision64():
    set_precision(64)
    yield
    set_precision(64)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny():
    """Gradient-check scale; raw widths equal so synthetic corpora fit."""
    return preset("tiny", word_dim=6)


@pytest.fixture
def desk():
    return preset("desk")


@pytest.fixture
def tiny_model(tiny):
    return TwinNet(tiny, seed=0)


@pytest.fixture(params=range(20), ids=lambda s: f"seed{s}")
def grad_case(request, tiny):
    """(model, rng) with both the initialization and the input draws tied to the seed."""
    return TwinNet(tiny, seed=request.param), np.random.default_rng(1000 + request.param)


@pytest.fixture
def tiny_corpus(tmp_path):
    spec = SyntheticSpec(num_videos=3, frames_per_video=24, raw_dim=6, event_count_per_video=2,
                         event_length_range=(3, 6), noise_scale=0.1, seed=1, query_tokens=3)
    return generate_synthetic_dataset(spec, tmp_path / "corpus")


@pytest.fixture
def tiny_batch(tiny, tiny_corpus):
    """Four samples with fixed anchors: before, at start, inside and after an event."""
    entries = load_manifest(tiny_corpus)
    cache = FeatureCache().warm(entries)
    samples = []
    for (entry, ann), shift in zip(iter_annotations(entries), (-4, 0, 2, 5)):
        frames = cache.get(entry.frame_feature_path)
        T = int(np.clip(ann.t_s + shift, 0, len(frames) - 1))
        samples.append(build_sample(ann, frames, cache.get(ann.query_feature_path), tiny,
                                    np.random.default_rng(0), anchor=T))
    return collate(samples)
