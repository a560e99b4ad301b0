import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_cohort(tmp_path_factory):
    """60 patients with 32px images, split 60/20/20."""
    from fundusfusion.cohort import (PreprocessConfig, SignalConfig, generate_synthetic_cohort,
                                     stratified_patient_split)
    from fundusfusion.data import CohortAccess

    out = tmp_path_factory.mktemp("cohort")
    coh = generate_synthetic_cohort(60, SignalConfig(image_size=32), seed=7, out_dir=out)
    split = stratified_patient_split(coh.records, (0.6, 0.2, 0.2), seed=0)
    return CohortAccess(coh.records, split, PreprocessConfig(image_size=32))


@pytest.fixture(scope="session")
def tables(small_cohort):
    return small_cohort.table("train"), small_cohort.table("validation"), small_cohort.table("test")


# ------------------------------------------------------------ acceptance summary

_criteria: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    entry = _criteria.setdefault(number, {"title": title, "failed": [], "ran": 0, "skipped": 0})
    if report.when == "call" or report.outcome != "passed":
        if report.failed:
            entry["failed"].append(item.name)
        elif report.skipped:
            entry["skipped"] += 1
        elif report.when == "call":
            entry["ran"] += 1


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        if e["failed"]:
            status = "FAIL"
        elif e["ran"] == 0:
            status = "SKIP"
        else:
            status = "PASS"
        detail = f" ({', '.join(e['failed'])})" if e["failed"] else ""
        terminalreporter.write_line(f"criterion {number} {e['title']}: {status}{detail}")
