import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from spatialmome.dataspace import SynthConfig, synth_tissue

settings.register_profile("suite", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("suite")


@pytest.fixture(scope="session")
def small_slide():
    return synth_tissue(SynthConfig(rows=10, cols=10, n_genes=20, feature_dim=8, markers_per_domain=4,
                                    seed=11, slide_id="small"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
