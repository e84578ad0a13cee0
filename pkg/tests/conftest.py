from __future__ import annotations

import io

import numpy as np
import pytest

from stflow.ingest import TRIP_COLUMNS, TripRecord, to_unix

HEADER = ",".join(TRIP_COLUMNS)


def trip_row(start="2021-06-01 08:05:00", end="2021-06-01 08:20:00", sid="A", eid="B",
             slat="40.70", slng="-74.00", elat="40.71", elng="-74.01", ride="r1") -> str:
    return (f"{ride},classic_bike,{start},{end},Station {sid},{sid},Station {eid},{eid},"
            f"{slat},{slng},{elat},{elng},member")


def csv_stream(*rows: str) -> io.StringIO:
    return io.StringIO("\n".join([HEADER, *rows]) + "\n")


def make_trip(start: str, end: str, sid: str, eid: str, slat=40.7, slng=-74.0,
              elat=40.71, elng=-74.01) -> TripRecord:
    return TripRecord(to_unix(start), to_unix(end), sid, eid, slat, slng, elat, elng)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance reporting -------------------------------------------------
#
# Tests marked ``criterion(n)`` get one summary line each.  A test may attach
# a human-readable measurement with ``record_property("detail", ...)``.

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    marker = dict(report.user_properties).get("criterion")
    if marker is None:
        return
    detail = dict(report.user_properties).get("detail", "")
    if report.skipped:
        reason = report.longrepr[2] if isinstance(report.longrepr, tuple) else str(report.longrepr)
        _CRITERIA[marker] = ("SKIP", reason.removeprefix("Skipped: "))
    elif report.when == "call" or report.failed:
        status = "PASS" if report.passed else "FAIL"
        if marker not in _CRITERIA or _CRITERIA[marker][0] == "PASS":
            _CRITERIA[marker] = (status, detail)


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            item.user_properties.append(("criterion", mark.args[0]))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {status:4s}  {detail}")
