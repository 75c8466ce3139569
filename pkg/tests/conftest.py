import os
from pathlib import Path

import numpy as np
import pytest

from selfpose.mesh import make_mesh
from selfpose.pipeline import load_assets
from selfpose.render import CameraIntrinsics
from selfpose.simulator import DEFAULT_OBJECTS


@pytest.fixture(scope="session")
def K():
    return CameraIntrinsics()


@pytest.fixture(scope="session")
def asset_dir(tmp_path_factory):
    # SELFPOSE_ASSETS reuses a cache between sessions; delete it after changing a mesh
    cached = os.environ.get("SELFPOSE_ASSETS")
    return Path(cached) if cached else tmp_path_factory.mktemp("assets")


@pytest.fixture(scope="session")
def assets(asset_dir, K):
    """SDFs, codebooks and model points for the whole corpus, built once per session."""
    return load_assets(DEFAULT_OBJECTS, K, asset_dir)


@pytest.fixture(scope="session")
def bracket():
    return make_mesh("bracket")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria (slow)")


@pytest.fixture
def acceptance_log(request):
    return request.config.stash[_ACCEPTANCE]


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(lines):
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
