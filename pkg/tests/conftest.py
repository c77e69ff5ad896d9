import json
from pathlib import Path

import numpy as np
import pytest

from ducc_adapt.chem_io import parse_fcidump, to_spin_orbitals

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"


def fixture_path(name: str) -> Path:
    return FIXTURES / f"{name}.FCIDUMP"


def fixture_meta(name: str) -> dict:
    return json.loads((FIXTURES / f"{name}.json").read_text())


def load_spin(name: str):
    return to_spin_orbitals(parse_fcidump(fixture_path(name)))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def report(request):
    """Record one acceptance line; lines are echoed in the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(criterion: str, status: str, detail: str = "") -> None:
        line = f"criterion {criterion}: {status}" + (f" ({detail})" if detail else "")
        lines.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
