import shutil
from pathlib import Path

import pytest

DATA = Path(__file__).parent / "data"

_acceptance: list[tuple[str, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(label): acceptance criterion reported in the summary")


def pytest_runtest_logreport(report):
    marker = report.__dict__.get("acceptance_label")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        outcome = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        _acceptance.append((outcome, marker))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    m = item.get_closest_marker("acceptance")
    if m is not None:
        report.acceptance_label = m.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for outcome, label in _acceptance:
        terminalreporter.write_line(f"{outcome}  {label}")


@pytest.fixture
def data_dir() -> Path:
    return DATA


@pytest.fixture
def workdir(tmp_path) -> Path:
    """A scratch copy of the fixture directory, so CLI runs can write outputs."""
    dst = tmp_path / "data"
    shutil.copytree(DATA, dst, ignore=shutil.ignore_patterns("out", "__pycache__"))
    return dst
