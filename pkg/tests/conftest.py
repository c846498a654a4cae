import contextlib

import pytest

_RESULTS_KEY = pytest.StashKey[dict]()


def _results(config) -> dict:
    return config.stash.setdefault(_RESULTS_KEY, {})


@pytest.fixture
def criterion(request):
    """Context manager recording one acceptance line; an exception inside marks it FAIL."""

    @contextlib.contextmanager
    def record(number: int, title: str):
        note = {"detail": ""}
        try:
            yield note
        except BaseException as exc:
            msg = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
            _results(request.config)[number] = (title, False, msg)
            print(f"CRITERION {number} FAIL  {title}: {msg}")
            raise
        _results(request.config)[number] = (title, True, note["detail"])
        print(f"CRITERION {number} PASS  {title}: {note['detail']}")

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = _results(config)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, ok, detail = results[number]
        terminalreporter.write_line(f"CRITERION {number} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
