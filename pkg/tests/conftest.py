"""Shared fixture-preset objects and the per-criterion PASS/FAIL summary.

Acceptance tests carry ``@pytest.mark.criterion(n, title)``. Their outcomes are
printed as one line per criterion at the end of the run, together with the
values they measured. With ``STYLER_RECORD_FIXTURE=1`` those values are also
written to ``tests/fixture_values.json``.
"""

import json
import os
from pathlib import Path

import pytest

VALUES_PATH = Path(__file__).with_name("fixture_values.json")

_outcomes = {}  # criterion -> (title, passed, message)
_measured = {}  # criterion -> {name: value}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    n, title = marker.args
    if report.failed:
        message = str(call.excinfo.value).strip().splitlines()[0] if call.excinfo else "failed"
        _outcomes[n] = (title, False, message[:160])
    elif report.when == "call" and n not in _outcomes:
        _outcomes[n] = (title, report.passed, "")


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_outcomes):
        title, passed, message = _outcomes[n]
        values = _measured.get(n, {})
        shown = ", ".join(f"{k}={_fmt(v)}" for k, v in values.items() if not isinstance(v, (list, dict)))
        line = f"{'PASS' if passed else 'FAIL'}  {n:>2}. {title}"
        if shown:
            line += f"  [{shown}]"
        if message:
            line += f"  -- {message}"
        tr.write_line(line)
    if os.environ.get("STYLER_RECORD_FIXTURE") == "1":
        old = json.loads(VALUES_PATH.read_text()) if VALUES_PATH.exists() else {}
        old.update({str(n): v for n, v in _measured.items()})
        VALUES_PATH.write_text(json.dumps(old, indent=2, sort_keys=True) + "\n")
        tr.write_line(f"recorded measured values in {VALUES_PATH}")


def _fmt(v):
    return f"{v:.4g}" if isinstance(v, float) else str(v)


@pytest.fixture
def measure(request):
    """``measure(name, value)`` records a value under the test's criterion."""
    n = request.node.get_closest_marker("criterion").args[0]

    def record(name, value):
        _measured.setdefault(n, {})[name] = value
        return value

    return record


# ---------------------------------------------------------------- fixture preset

@pytest.fixture(scope="session")
def fixture_base():
    from styler import presets

    return presets.fixture_base()


@pytest.fixture(scope="session")
def adapters(fixture_base):
    from styler import presets

    return {style: presets.fixture_adapter(style, fixture_base)[0] for style in ("stripes", "invert")}


@pytest.fixture(scope="session")
def plan():
    from styler import presets
    from styler.schedule import SamplingPlan

    return SamplingPlan.uniform(1000, presets.FIXTURE_NUM_STEPS)


@pytest.fixture(scope="session")
def contents():
    from styler import presets

    return presets.content_images(10)


@pytest.fixture(scope="session")
def traces(fixture_base, contents, plan):
    """Default-config capture traces of the ten fixture content images."""
    from styler.injection import InjectionConfig, capture_trace

    return [capture_trace(fixture_base, img, plan, InjectionConfig()) for img in contents]
