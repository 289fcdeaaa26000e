import numpy as np
import pytest

from xtrans2cap.config import RunConfig, with_
from xtrans2cap.synthdata import GenConfig, generate_split

TINY_MODEL = {"model.L": 2, "model.d": 16, "model.heads": 2, "model.n_mem": 2, "model.d_ff": 32}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def gen_cfg():
    return GenConfig(seed=7)


@pytest.fixture(scope="session")
def small_data(gen_cfg):
    return {
        "train": generate_split(gen_cfg, "train", 40),
        "val": generate_split(gen_cfg, "val", 12),
        "test": generate_split(gen_cfg, "test", 12),
    }


@pytest.fixture
def tiny_cfg():
    return with_(RunConfig(), **TINY_MODEL, **{"schedule.epochs": 1, "optim.batch_size": 8})


_VERDICTS: list[str] = []


def record_verdict(line: str) -> None:
    _VERDICTS.append(line)


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
