import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from scanfer.data import load_dataset, synth_dataset  # noqa: E402
from scanfer.model import FerModel  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def desk_model():
    return FerModel.create(seed=0)


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    synth_dataset(out, per_class=10, size=40, seed=0)
    return out


@pytest.fixture(scope="session")
def synth_arrays(synth_dir):
    from scanfer.data import load_manifest

    return load_dataset(load_manifest(synth_dir / "manifest.csv"), 40)


ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
