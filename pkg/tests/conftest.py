import numpy as np
import pytest

from mhitnet.network import EncoderSpec, MhitNet, NetConfig

# filled by test_acceptance.py, printed once at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    # 1/8 width keeps every stage divisible by 4 heads; 16x16 is the smallest legal input
    return NetConfig(EncoderSpec(width=0.125, blocks_per_stage=(1, 1, 1, 1)), image_size=16)


@pytest.fixture
def tiny_net(tiny_cfg):
    return MhitNet(tiny_cfg, seed=0)
