import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from a2fm import harness  # noqa: E402
from a2fm.config import ExperimentConfig  # noqa: E402
from a2fm.videodata import VideoClip  # noqa: E402


@pytest.fixture(scope="session")
def cfg():
    return ExperimentConfig()


@pytest.fixture(scope="session")
def data(cfg):
    return harness.make_data(cfg)


@pytest.fixture(scope="session")
def trained(cfg, data, tmp_path_factory):
    """The default zoo, trained once; checkpoints land in a session directory."""
    out = tmp_path_factory.mktemp("models")
    zoo, reports = harness.train_zoo(cfg, data[0], out)
    return zoo, reports, out


@pytest.fixture(scope="session")
def zoo(trained):
    return trained[0]


@pytest.fixture(scope="session")
def models_dir(trained):
    return trained[2]


@pytest.fixture(scope="session")
def eval_clips(data):
    return data[1]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_clip(rng, T=12, W=16, H=16, C=1, label=0):
    return VideoClip(rng.uniform(0, 1, size=(T, W, H, C)).astype(np.float32).astype(np.float64), label)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import VERDICTS
    except ImportError:
        return
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for code in sorted(VERDICTS, key=lambda c: int(c[1:])):
            terminalreporter.write_line(VERDICTS[code])
