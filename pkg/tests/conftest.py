import contextlib
import sys
import time
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

# criterion number -> (passed, title, detail); filled by test_acceptance.py
ACCEPTANCE = {}


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
    yield


@contextlib.contextmanager
def criterion(number: int, title: str):
    """Record PASS/FAIL for one acceptance criterion; failures re-raise."""
    notes = []
    start = time.perf_counter()
    try:
        yield notes
    except BaseException as exc:
        detail = "; ".join(notes + [f"{type(exc).__name__}: {exc}".splitlines()[0]])
        ACCEPTANCE[number] = (False, title, f"{detail} [{time.perf_counter() - start:.1f}s]")
        raise
    ACCEPTANCE[number] = (True, title, f"{'; '.join(notes)} [{time.perf_counter() - start:.1f}s]")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
