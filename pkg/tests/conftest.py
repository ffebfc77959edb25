import numpy as np
import pytest
import torch

from cellweight.annotations import ClassCensus, make_classes

NAMES = ["CD8+", "CD4+/FOXP3-", "CD4+/FOXP3+"]
MARROW = {"CD8+": 2244, "CD4+/FOXP3-": 997, "CD4+/FOXP3+": 243}


@pytest.fixture(autouse=True, scope="session")
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def classes():
    return make_classes(NAMES)


@pytest.fixture
def marrow_census():
    return ClassCensus.from_names(MARROW)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one acceptance line; the assertion still decides pass/fail."""

    def record(name: str, ok: bool, detail: str):
        line = f"{name} {'PASS' if ok else 'FAIL'}: {detail}"
        _VERDICTS.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[0][3:])):
            terminalreporter.write_line(line)
