import numpy as np
import pytest

from specquant.library import synthesize_library
from specquant.synth import ConcentrationScheme, NoiseSpec, generate_dataset


@pytest.fixture(scope="session")
def lib():
    return synthesize_library(0)


@pytest.fixture(scope="session")
def noiseless_small(lib):
    return generate_dataset(lib, ConcentrationScheme.group(1), 200, seed=11)


@pytest.fixture(scope="session")
def noisy_small(lib):
    return generate_dataset(lib, ConcentrationScheme.group(1), 1000, noise=NoiseSpec(40), seed=12)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


CRITERIA_KEY = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def criteria(request):
    """Collects one PASS/FAIL line per acceptance criterion for the run summary."""
    lines = request.config.stash.setdefault(CRITERIA_KEY, [])

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(CRITERIA_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
