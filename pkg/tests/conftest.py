import numpy as np
import pytest

_CRITERIA: list[tuple[str, str, str]] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


@pytest.fixture
def criterion(request):
    """Record an acceptance criterion's outcome for the end-of-run summary."""
    info = {}

    def declare(label: str, text: str) -> dict:
        info.update(label=label, text=text, note="")
        return info

    yield declare
    if info:
        rep = getattr(request.node, "rep_call", None)
        status = "PASS" if rep is not None and rep.passed else "FAIL"
        detail = f"{info['text']}" + (f" [{info['note']}]" if info["note"] else "")
        _CRITERIA.append((info["label"], status, detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for label, status, detail in sorted(_CRITERIA, key=lambda c: c[0]):
        terminalreporter.write_line(f"{status}  criterion {label}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
