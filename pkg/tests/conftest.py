import pytest

_VERDICTS: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion; returns ``passed``."""

    def record(number: int, title: str, passed: bool, detail: str, seconds: float) -> bool:
        tag = "PASS" if passed else "FAIL"
        _VERDICTS[number] = f"[{tag}] criterion {number:>2} {title}: {detail} ({seconds:.1f} s)"
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[n])
