import json
import os

import pytest

from holespin.config import load_config
from holespin.harness import run

_SUMMARY = []


@pytest.fixture
def criterion(record_property):
    """Record one acceptance line; call before asserting so failures are reported too."""

    def record(number, ok, detail):
        record_property("criterion", (number, bool(ok), detail))
        return ok

    return record


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    for key, value in report.user_properties:
        if key == "criterion":
            number, ok, detail = value
            _SUMMARY.append((number, ok and report.passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _SUMMARY:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(_SUMMARY, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def preset_runs(tmp_path_factory):
    """Run each shipped preset once (single worker); returns name -> output directory."""
    cache = {}

    def get(name):
        if name not in cache:
            out = tmp_path_factory.mktemp(f"{name}-w1")
            run(load_config(name), out=out, workers=1)
            cache[name] = out
        return cache[name]

    return get


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


@pytest.fixture
def clean_workers_env(monkeypatch):
    monkeypatch.delenv("HOLESPIN_WORKERS", raising=False)
    return os.environ
