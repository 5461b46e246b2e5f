"""Shared fixtures plus the per-criterion summary printed at the end of a run."""
from __future__ import annotations

import pytest

# criterion number -> list of (part, passed, detail); filled by test_acceptance
CRITERIA: dict = {}


def record(number: int, part: str, passed: bool, detail: str) -> None:
    CRITERIA.setdefault(number, []).append((part, bool(passed), detail))


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        parts = CRITERIA[number]
        ok = all(p for _, p, _ in parts)
        detail = "; ".join(f"{name}: {'ok' if p else 'FAILED'} ({d})" for name, p, d in parts)
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'} | {detail}")


@pytest.fixture
def rng():
    import numpy as np

    return np.random.default_rng(12345)
