from __future__ import annotations

import logging

import pytest

from archiveseg.synthdata import SynthSpec, generate_dataset


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.WARNING)


@pytest.fixture(scope="session")
def small_spec() -> SynthSpec:
    return SynthSpec(num_categories=4, images_per_category=10, val_images_per_category=3,
                     multi_val_images=6, image_size=(32, 32), seed=3)


@pytest.fixture(scope="session")
def small_dataset(small_spec, tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    return small_spec, generate_dataset(small_spec, out)


# -- acceptance reporting: one PASS/FAIL line per criterion ------------------

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when == "teardown" or (report.when == "setup" and report.passed):
        return
    number, title = marker.args
    details = [str(v) for k, v in item.user_properties if k == "detail"]
    if report.failed and call.excinfo is not None:
        details.append(f"{call.excinfo.typename}: {str(call.excinfo.value).splitlines()[0][:160]}")
    entry = _CRITERIA.setdefault(number, {"title": title, "passed": True, "details": []})
    entry["passed"] &= report.passed
    entry["details"] += details


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        status = "PASS" if entry["passed"] else "FAIL"
        line = f"criterion {number} [{status}] {entry['title']}"
        if entry["details"]:
            line += " -- " + "; ".join(entry["details"])
        terminalreporter.write_line(line)
