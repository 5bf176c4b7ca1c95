import contextlib

import pytest

_VERDICTS: dict[int, str] = {}


class _Criterion:
    def __init__(self):
        self.failures: list[str] = []
        self.notes: list[str] = []

    def check(self, ok: bool, what: str) -> None:
        if not ok:
            self.failures.append(what)

    def note(self, text: str) -> None:
        self.notes.append(text)


@pytest.fixture
def criterion():
    """Context manager recording one PASS/FAIL line per acceptance criterion."""

    @contextlib.contextmanager
    def run(number: int, title: str):
        c = _Criterion()
        error = None
        try:
            yield c
        except Exception as exc:  # recorded as a failure, then re-raised
            error = exc
            c.failures.append(f"{type(exc).__name__}: {exc}")
        ok = not c.failures
        detail = "; ".join(c.notes + c.failures)
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        _VERDICTS[number] = line
        print(line)
        if error is not None:
            raise error
        assert ok, line

    return run


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[number])
