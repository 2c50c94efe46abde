import pytest

from microdarts import autodiff as ad


@pytest.fixture
def f64():
    with ad.precision("f64"):
        yield


@pytest.fixture(autouse=True)
def _reset_precision():
    yield
    ad.set_precision("f32")


def pytest_configure(config):
    config._acceptance_lines = []


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` prints and records one PASS/FAIL line."""
    lines = request.config._acceptance_lines

    def record(n, ok, detail=""):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        print(line)
        lines.append(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
