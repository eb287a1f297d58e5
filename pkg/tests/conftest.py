import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from xshift import synth  # noqa: E402


@pytest.fixture(scope="session")
def cohort_dir(tmp_path_factory):
    """Factory writing (and caching) a synthetic study per (scenario, seed)."""
    cache = {}

    def make(name, seed=0):
        key = (name, seed)
        if key not in cache:
            out = tmp_path_factory.mktemp(f"{name}-{seed}")
            synth.write_cohort(synth.generate_cohort(synth.scenario(name), seed), out)
            cache[key] = out
        return cache[key]

    return make


@pytest.fixture
def threads(monkeypatch):
    def set_threads(n):
        monkeypatch.setenv("XSHIFT_THREADS", str(n))
    yield set_threads
    os.environ.pop("XSHIFT_THREADS", None)


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record the verdict of an acceptance criterion, then assert it."""

    def record(number, ok, detail):
        _CRITERIA[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        assert ok, detail

    def skip(number, reason):
        _CRITERIA[number] = f"criterion {number:2d}: SKIP  {reason}"
        pytest.skip(reason)

    record.skip = skip
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[n])
