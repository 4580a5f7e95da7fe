"""Shared pytest plumbing.

The acceptance tests record one PASS/FAIL line each; reprinting them in the
terminal summary keeps the verdicts visible even when every test passes.
"""

import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def criterion():
    """Record ``criterion NN: PASS/FAIL name [detail]`` and return ok."""

    def _record(num: int, name: str, ok: bool, detail: str = "") -> bool:
        status = "PASS" if ok else "FAIL"
        tail = f"  [{detail}]" if detail else ""
        ACCEPTANCE_LINES.append(f"criterion {num:>2}: {status}  {name}{tail}")
        return ok

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
