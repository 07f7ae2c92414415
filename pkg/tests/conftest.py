import sys

import numpy as np
import pytest
import torch

from lepdnet.synthgen import SynthSpec, generate_dataset, generate_records

torch.set_num_threads(1)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: acceptance criteria A1-A8")


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "ACCEPTANCE", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(lines):
        terminalreporter.write_line(lines[name])


@pytest.fixture(scope="session")
def small_records():
    return generate_records(SynthSpec(n_per_class=10, seed=1))


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    generate_dataset(SynthSpec(n_per_class=10, seed=1), root)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(0)
