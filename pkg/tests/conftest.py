import numpy as np
import pytest

from mosaic_sr import tensor as T
from mosaic_sr.io import synthesize_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with T.precision(np.float64):
        yield


@pytest.fixture(scope="session")
def ms_dataset(tmp_path_factory):
    """Small MS dataset: 4 train, 1 val, 1 test pairs of 72x72 HR."""
    out = tmp_path_factory.mktemp("ms_data")
    synthesize_dataset(6, (72, 72), "ms4x4", seed=7, out_dir=out,
                       splits={"train": 4, "val": 1, "test": 1})
    return out / "manifest.json"


@pytest.fixture(scope="session")
def bayer_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("bayer_data")
    synthesize_dataset(3, (36, 48), "bayer", seed=3, out_dir=out,
                       splits={"train": 2, "test": 1})
    return out / "manifest.json"


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""
    def record(criterion: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line, flush=True)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
