import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from salanet.network import NetworkConfig  # noqa: E402
from salanet.phantom import PhantomParams, generate_phantom  # noqa: E402
from salanet.preprocess import preprocess_study  # noqa: E402

torch.set_num_threads(1)

# 3-level, 2-4-8 filters: enough to exercise every code path in well under a second
TINY = NetworkConfig(levels=3, filters=(2, 4, 8), deep_supervision=2)


@pytest.fixture(scope="session")
def tiny_config():
    return replace(TINY)


@pytest.fixture(scope="session")
def phantom_study():
    return generate_phantom(PhantomParams(seed=3), "S003")


@pytest.fixture(scope="session")
def clean_params():
    return PhantomParams(seed=0, noise_sigma=0.0, jitter_translation=0.0, jitter_rotation=0.0, jitter_scale=0.0)


@pytest.fixture(scope="session")
def preprocessed(phantom_study):
    return preprocess_study(phantom_study)


@pytest.fixture(scope="session")
def preprocessed_pair():
    return [preprocess_study(generate_phantom(PhantomParams(seed=s), f"S{s:03d}")) for s in (10, 11)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
