import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from earlyexit.model import ModelConfig, init_weights  # noqa: E402
from earlyexit.synthetic import SyntheticSpec  # noqa: E402

RAMP = (0.2, 0.5, 0.8, 0.95, 1.0)


@pytest.fixture(scope="session")
def small_config():
    return ModelConfig(num_layers=4, vocab_size=32, d_model=32, d_k=16, d_v=16,
                       d_ff=64, num_heads=2, max_len=12)


@pytest.fixture(scope="session")
def weights(small_config):
    return init_weights(small_config, seed=11)


@pytest.fixture(scope="session")
def ramp_spec():
    return SyntheticSpec(num_layers=5, vocab_size=16, d_model=16, alphas=RAMP, gamma=0.5, seed=7)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
