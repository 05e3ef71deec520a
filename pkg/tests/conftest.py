import pytest

from plcfuzz.driver import DriverConfig, login_sequence
from plcfuzz.sim import SimConfig, SimServer


@pytest.fixture
def make_sim():
    """Factory for running simulators on ephemeral ports; all are stopped at teardown."""
    servers = []

    def factory(**kw):
        kw.setdefault("port", 0)
        server = SimServer(SimConfig(**kw)).start()
        servers.append(server)
        return server

    yield factory
    for server in servers:
        server.stop()


@pytest.fixture
def sim(make_sim):
    return make_sim()


@pytest.fixture
def drv_config(sim):
    return DriverConfig(port=sim.port, reply_timeout=1.0)


@pytest.fixture
def session(drv_config):
    s = login_sequence(drv_config)
    yield s
    s.close()


@pytest.fixture
def app_session(drv_config):
    s = login_sequence(drv_config, "Application")
    yield s
    s.close()


@pytest.fixture
def wait_until():
    """Poll ``cond`` until true or ``timeout`` seconds pass; returns the last value."""
    import time

    def waiter(cond, timeout=3.0):
        deadline = time.monotonic() + timeout
        while True:
            value = cond()
            if value or time.monotonic() > deadline:
                return value
            time.sleep(0.01)

    return waiter


# ---------------------------------------------------------------- acceptance summary

ACCEPTANCE_RESULTS: dict = {}


@pytest.fixture
def criterion(request):
    """Context manager recording one PASS/FAIL line per acceptance criterion."""
    import contextlib

    @contextlib.contextmanager
    def record(number: int, title: str):
        detail: dict = {}
        try:
            yield detail
        except BaseException as exc:
            ACCEPTANCE_RESULTS[number] = (False, title, f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}")
            print(f"criterion {number}: FAIL  {title}")
            raise
        summary = ", ".join(f"{k}={v}" for k, v in detail.items())
        ACCEPTANCE_RESULTS[number] = (True, title, summary)
        print(f"criterion {number}: PASS  {title}  [{summary}]")

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        ok, title, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {title}  [{detail}]")
