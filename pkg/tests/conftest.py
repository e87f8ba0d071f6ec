import os
import shutil
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=100, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

GOLDEN = Path(__file__).parent / "golden"

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    prev = _criteria.get(n, (title, "PASS"))[1]
    if rep.failed:
        status = "FAIL"
    elif rep.skipped and rep.when in ("setup", "call"):
        status = "SKIP" if prev != "FAIL" else prev
    else:
        status = prev
    if rep.when == "call" or rep.failed or rep.skipped:
        _criteria[n] = (title, status)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        title, status = _criteria[n]
        terminalreporter.write_line(f"criterion {n:>2}: {status}  {title}")


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory):
    from gerea.fixtures import write_fixture

    d = tmp_path_factory.mktemp("fixture")
    write_fixture(d)
    return d


@pytest.fixture
def fresh_fixture(tmp_path, fixture_dir):
    """A private copy of the fixture dataset and config."""
    shutil.copytree(fixture_dir / "data", tmp_path / "data")
    shutil.copy(fixture_dir / "config.yaml", tmp_path / "config.yaml")
    return tmp_path
