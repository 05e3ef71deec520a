"""Runtime driver: channel counters, typed helpers, crash probing and exploit templates."""

import subprocess
import sys
import time

import pytest

from plcfuzz import monitor
from plcfuzz.driver import (
    AppNotLoaded,
    ConnectRefused,
    CounterInconsistent,
    DriverConfig,
    DriverSession,
    InterpreterFault,
    StatusError,
    generate_exploit_template,
    login_sequence,
    probe_dead,
    status_sequence,
)
from plcfuzz.fuzz.records import CrashRecord
from plcfuzz.sim.runtime import seed_record_add_payload
from plcfuzz.tags import encode_tags, leaf


def test_fresh_channel_state(drv_config):
    with DriverSession.connect(config=drv_config) as s:
        assert s.channel_id >= 1 and s.blk_counter == 0
        assert s.device_session_id is None


def test_blk_counter_increments_per_request(session):
    start = session.blk_counter
    for i in range(5):
        session.send_command(0x0F, 0x01)
        assert session.blk_counter == start + i + 1


def test_app_session_requires_device_session(app_session):
    assert app_session.device_session_id is not None and app_session.app_session_id is not None


def test_connect_refused():
    import socket

    with socket.socket() as probe:
        probe.bind(("127.0.0.1", 0))
        port = probe.getsockname()[1]
    with pytest.raises(ConnectRefused):
        DriverSession.connect(config=DriverConfig(port=port, connect_timeout=0.5))


def test_login_and_app_login_errors(session):
    with pytest.raises(AppNotLoaded) as exc:
        session.app_login("Missing")
    assert exc.value.status == 0x504


def test_get_target_ident_on_fresh_session(drv_config):
    with DriverSession.connect(config=drv_config) as s:
        assert "node_name" in s.get_target_ident()


def test_mem_read_fault(app_session):
    with pytest.raises(InterpreterFault) as exc:
        app_session.mem_read(0xFFFF, 4)
    assert exc.value.code == monitor.FAULT_BUFFER_OVERRUN


def test_mem_write_invalid_offset(app_session):
    with pytest.raises(InterpreterFault):
        app_session.mem_write(0x10000, b"\x01\x02")


def test_mem_write_zero_length(app_session):
    with pytest.raises(StatusError) as exc:
        app_session.mem_write(0, b"")
    assert exc.value.status == 0x02


def test_mem_write_many(app_session):
    app_session.mem_write_many([(0, b"\x01\x02"), (10, b"\xaa\xbb\xcc")])
    assert app_session.mem_read(0, 2) == b"\x01\x02"
    assert app_session.mem_read(10, 3) == b"\xaa\xbb\xcc"


def test_memdump_chunking(sim, app_session):
    sent = []
    app_session.recorder = lambda direction, data: sent.append((direction, data[18]))
    data = app_session.memdump(0, 300)
    assert len(data) == 300
    # one BLK per chunk (128 + 128 + 44); the client also ACKs each reply
    assert sent.count(("client", 0x01)) == 3
    area0 = sim.call(lambda rt: bytes(rt.apps["Application"].area0[:300]))
    assert data == area0


def test_memdump_straddling_end(app_session):
    with pytest.raises(InterpreterFault) as exc:
        app_session.memdump(0x10000 - 200, 300)
    assert exc.value.code == monitor.FAULT_BUFFER_OVERRUN
    assert len(exc.value.partial) == 128


def test_app_control_and_status(sim, app_session):
    assert app_session.app_control("start") == "running"
    assert app_session.app_control("status") == "running"
    assert app_session.app_control("stop") == "stopped"
    with pytest.raises(ValueError):
        app_session.app_control("explode")


def test_fetch_logs_after_trigger(make_sim):
    sim = make_sim(bugs={"trace"})
    s = login_sequence(DriverConfig(port=sim.port))
    with pytest.raises(Exception):
        s.send_command(0x0F, 0x0D, seed_record_add_payload(0x1800))
    s.close()
    time.sleep(0.05)
    with login_sequence(DriverConfig(port=sim.port)) as s2:
        entries = s2.fetch_logs()
    assert any(e.severity >= 8 and e.component == "CmpTraceMgr" for e in entries)


def test_keepalive_latency(session):
    assert session.keepalive_tick()
    assert session.latencies[-1] < 0.05


def test_probe_dead_after_stop(make_sim):
    sim = make_sim()
    s = login_sequence(DriverConfig(port=sim.port, keepalive_interval=0.1))
    sim.stop()
    assert probe_dead(s, 3)
    s.close()


def test_counter_reset_detected(sim, session):
    session.send_command(0x0F, 0x01)
    sim.call(lambda rt: rt.reset_counters())
    with pytest.raises(CounterInconsistent):
        session.send_command(0x0F, 0x01)


def test_status_sequence_includes_interpreter_code():
    forest = [leaf(0xFF7F, b"\x00\x00"), leaf(0x41, b"\x08")]
    assert status_sequence(forest) == [("service", 0x00), ("monitor", 0x08)]


def _finding(app=None):
    return CrashRecord(
        routing=(0x0F, 0x0D),
        input=encode_tags(seed_record_add_payload(0x1800)),
        kind="channel_dead",
        last_status_sequence=(("service", 0x11),),
        app=app,
    )


def test_exploit_template_is_deterministic():
    assert generate_exploit_template(_finding()) == generate_exploit_template(_finding())


def test_exploit_template_app_login_only_when_needed():
    assert "--app" not in generate_exploit_template(_finding())
    assert "--app bf_mmove_1" in generate_exploit_template(_finding("bf_mmove_1"))


def test_exploit_template_reproduces_crash(make_sim, tmp_path):
    script = tmp_path / "repro.sh"
    script.write_text(generate_exploit_template(_finding()))
    sim = make_sim(bugs={"trace"})
    env = {"PYTHON": sys.executable, "PATH": "/usr/bin:/bin"}
    done = subprocess.run(["sh", str(script), "127.0.0.1", str(sim.port)], capture_output=True, text=True, env=env, timeout=60)
    assert done.returncode == 0, done.stdout + done.stderr
    assert "crash reproduced" in done.stdout
    # against a disarmed simulator the same script reports failure
    calm = make_sim()
    done = subprocess.run(["sh", str(script), "127.0.0.1", str(calm.port)], capture_output=True, text=True, env=env, timeout=60)
    assert done.returncode == 1
