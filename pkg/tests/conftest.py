import shutil

import pytest

from sglstm.config import load_config
from sglstm.fixture import fixture_dir
from sglstm.tensor_math import make_rng

from helpers import ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture(scope="session")
def toy_config_path():
    return fixture_dir() / "toy.cfg"


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory, toy_config_path):
    """One full pipeline run over the bundled toy fixture, shared by tests."""
    from sglstm import pipeline

    work = tmp_path_factory.mktemp("toy_run")
    cfg = load_config(toy_config_path, [f"workdir={work}"])
    reports = pipeline.run_all(cfg)
    return cfg, reports


@pytest.fixture
def toy_copy(tmp_path):
    """Writable copy of the bundled fixture directory."""
    dst = tmp_path / "toy"
    shutil.copytree(fixture_dir(), dst)
    return dst
