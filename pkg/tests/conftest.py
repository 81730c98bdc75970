import time
from contextlib import contextmanager

import pytest

_LINES: list[str] = []


class Outcome:
    def __init__(self):
        self.ok = False
        self.detail = ""

    def check(self, ok: bool, detail: str) -> None:
        self.ok, self.detail = bool(ok), detail


@pytest.fixture
def criterion():
    """``with criterion(n, title) as c: c.check(ok, detail)`` records one PASS/FAIL line."""

    @contextmanager
    def run(n: int, title: str, budget: float | None = None):
        out = Outcome()
        start = time.perf_counter()
        try:
            yield out
        except Exception as exc:
            _LINES.append(f"criterion {n:2d} FAIL  {title}: {type(exc).__name__}: {exc}")
            raise
        elapsed = time.perf_counter() - start
        ok = out.ok and (budget is None or elapsed <= budget)
        timing = f"{elapsed:.1f}s" + (f" of {budget:.0f}s" if budget is not None else "")
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {out.detail} [{timing}]"
        _LINES.append(line)
        print(line)
        assert ok, line

    return run


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES):
            terminalreporter.write_line(line)
