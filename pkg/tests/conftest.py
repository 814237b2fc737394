import pytest

VERDICTS: dict[int, tuple[bool, str]] = {}


def record_verdict(n: int, ok: bool, detail: str) -> None:
    """Store one acceptance verdict; a criterion fails if any of its parts fails."""
    prev_ok, prev = VERDICTS.get(n, (True, ""))
    VERDICTS[n] = (prev_ok and ok, f"{prev}; {detail}" if prev else detail)
    print(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        ok, detail = VERDICTS[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
