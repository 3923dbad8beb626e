import re

import numpy as np
import pytest

from spminv.cli import DEFAULT_BASIS, load_basis
from spminv.params import CellModel


@pytest.fixture(scope="session")
def basis():
    """The shipped meta-trained basis."""
    return load_basis(DEFAULT_BASIS)


@pytest.fixture(scope="session")
def cell():
    return CellModel.from_config()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------- acceptance report


def pytest_configure(config):
    config._acceptance = {}


@pytest.fixture
def record(request, capsys):
    """Store and print the outcome of one numbered acceptance criterion."""
    def _record(number: int, ok: bool, detail: str):
        request.config._acceptance[number] = (bool(ok), detail)
        with capsys.disabled():
            print(f"\nCRITERION {number}: {'PASS' if ok else 'FAIL'} | {detail}")
        return ok
    return _record


def pytest_terminal_summary(terminalreporter, config):
    results = dict(getattr(config, "_acceptance", {}))
    # a criterion test that ran but crashed before recording counts as failed
    for reports in terminalreporter.stats.values():
        for rep in reports:
            m = re.search(r"test_criterion_(\d+)_", getattr(rep, "nodeid", ""))
            if m and getattr(rep, "when", "") == "call":
                results.setdefault(int(m.group(1)), (False, f"raised before recording: {rep.outcome}"))
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"CRITERION {n}: {'PASS' if ok else 'FAIL'} | {detail}")
