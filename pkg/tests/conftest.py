import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from posecpr.gateway import Gateway, ResponseCache  # noqa: E402
from posecpr.mock_server import MockMLLM  # noqa: E402


@pytest.fixture
def mock_gateway(tmp_path):
    """Factory: ``make(script, **gateway_kwargs) -> (gateway, server)``."""
    opened = []

    def make(script, **kw):
        server = MockMLLM(script).start()
        kw.setdefault("cache", ResponseCache())
        kw.setdefault("sleep", lambda s: None)
        gw = Gateway(server.url, kw.pop("api_key", ""), **kw)
        opened.append((gw, server))
        return gw, server

    yield make
    for gw, server in opened:
        gw.close()
        server.stop()


# ---------------------------------------------------------------- acceptance verdicts

_VERDICTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed):
        return
    number, title = marker.args
    detail = "; ".join(v for k, v in item.user_properties if k == "detail")
    _VERDICTS[number] = (title, rep.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        title, ok, detail = _VERDICTS[number]
        line = f"{'PASS' if ok else 'FAIL'}  criterion {number}: {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
