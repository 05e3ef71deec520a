"""Reference runtime simulator: gating, seeded bugs, apps, settings and the server wrapper."""

import socket
import struct
import time

import pytest

from plcfuzz import monitor, wire
from plcfuzz.driver import (
    ChannelExhausted,
    ConnectionLost,
    DriverConfig,
    DriverSession,
    OpenTimeout,
    ReplyTimeout,
    login_sequence,
)
from plcfuzz.sim import NodeStore, Runtime, RuntimeDeath, SimConfig, StreamConnection, registry_json
from plcfuzz.sim.runtime import MAX_CHANNELS_KEY, seed_record_add_payload
from plcfuzz.tags import build_write_request, decode_tags, encode_tags, find, leaf, node


# ---------------------------------------------------------------- gating order


def test_unknown_group_and_command(session):
    assert session.send_command(0x77, 0x01).status == 0x301
    assert session.send_command(0x0F, 0x14).status == 0x302


def test_pre_login_command_is_rejected(drv_config):
    with DriverSession.connect(config=drv_config) as s:
        assert s.send_command(0x0F, 0x01).status == 0x1C


def test_session_bound_to_channel(drv_config):
    a = login_sequence(drv_config)
    b = login_sequence(drv_config)
    try:
        # b uses a's session id on its own channel
        assert b.send_command(0x0F, 0x01, session_id=a.device_session_id).status == 0x1C
    finally:
        a.close()
        b.close()


def test_missing_tag(session):
    assert session.send_command(0x0F, 0x0D).status == 0x300


def test_undecodable_tags_answer_tag_missing(session):
    assert session.send_command(0x0F, 0x0D, b"\x81\x00\x09\x40").status == 0x300


def test_app_gates(session):
    assert session.send_command(0x02, 0x01, [leaf(0x02, b"NoSuchApp")]).status == 0x504
    assert session.send_command(0x02, 0x14).status == 0x505


def test_bad_protocol_id(session):
    svc = wire.ServiceHeader(0x01, 0x01, 0, b"", protocol_id=0x1234)
    assert session.send_service(svc).status == 0x106


def test_double_login_invalidates_old_session(session):
    old = session.device_session_id
    new = session.device_login()
    assert new != old
    assert session.send_command(0x0F, 0x01, session_id=old).status == 0x1C
    assert session.send_command(0x0F, 0x01).status == 0x00


def test_decision_tree_default_for_unhandled_command(session):
    # a registered command without a handler answers from its catalog tree
    spec = next(s for s in session.catalog.commands.values() if s.handler is None and s.session == "device" and not s.required_tags)
    reply = session.send_command(spec.group, spec.command_id)
    assert reply.status == spec.decide([])


# ---------------------------------------------------------------- channels


def test_max_channels(make_sim):
    sim = make_sim(max_channels=1)
    cfg = DriverConfig(port=sim.port, reply_timeout=1.0)
    first = DriverSession.connect(config=cfg)
    try:
        with pytest.raises(ChannelExhausted) as exc:
            DriverSession.connect(config=cfg)
        assert exc.value.status == 0x1A
    finally:
        first.close()


def test_fifth_channel_rejected_with_default_cap(sim):
    cfg = DriverConfig(port=sim.port)
    sessions = [DriverSession.connect(config=cfg) for _ in range(4)]
    try:
        with pytest.raises(ChannelExhausted):
            DriverSession.connect(config=cfg)
    finally:
        for s in sessions:
            s.close()
    # closing the connections frees the slots
    DriverSession.connect(config=cfg).close()


def test_settings_raise_channel_cap(make_sim):
    sim = make_sim(max_channels=1)
    cfg = DriverConfig(port=sim.port)
    s = login_sequence(cfg)
    try:
        assert s.get_setting(MAX_CHANNELS_KEY) == 1
        s.set_setting(MAX_CHANNELS_KEY, 2)
        DriverSession.connect(config=cfg).close()
        assert s.send_command(0x06, 0x02, [leaf(0x10, MAX_CHANNELS_KEY.encode()), leaf(0x11, b"\x00\x01\x00\x00")]).status == 0x1A
        assert s.send_command(0x06, 0x01, [leaf(0x10, b"No.Such.Key")]).status == 0x10
    finally:
        s.close()


def test_channel_timeout_without_keepalive(make_sim):
    sim = make_sim(channel_timeout=0.3)
    s = login_sequence(DriverConfig(port=sim.port, reply_timeout=0.3, retransmits=0))
    try:
        time.sleep(0.5)
        with pytest.raises(ReplyTimeout):
            s.send_command(0x0F, 0x01)
    finally:
        s.close()


def test_keepalive_keeps_channel(make_sim):
    # scaled version of a long idle period: keepalives every 0.1 s against a 0.3 s timeout
    sim = make_sim(channel_timeout=0.3)
    s = login_sequence(DriverConfig(port=sim.port, keepalive_interval=0.1))
    try:
        assert s.idle(1.5)
        assert s.send_command(0x0F, 0x01).status == 0x00
    finally:
        s.close()


@pytest.mark.slow
def test_keepalive_keeps_channel_for_a_minute(sim):
    # real time: default 10 s channel timeout, default 1 s keepalive interval
    s = login_sequence(DriverConfig(port=sim.port))
    try:
        assert s.idle(60.0)
        assert s.send_command(0x0F, 0x01).status == 0x00
    finally:
        s.close()


def test_retransmit_gets_cached_reply():
    rt = Runtime(SimConfig())
    open_req = wire.encode_frame(wire.channel_frame(wire.OPEN_REQUEST, sender=(1,), receiver=(2,)))
    (confirm,) = rt.handle_frame(1, open_req)
    cid = wire.decode_frame(confirm).channel.channel_id
    login = wire.encode_frame(
        wire.channel_frame(wire.BLK, cid, blk_id=1, service=wire.ServiceHeader(0x01, 0x02), sender=(1,), receiver=(2,))
    )
    first = rt.handle_frame(1, login)
    assert rt.handle_frame(1, login) == first
    assert len(rt.device_sessions) == 1
    # an out-of-order blk id is dropped
    skip = wire.encode_frame(
        wire.channel_frame(wire.BLK, cid, blk_id=5, service=wire.ServiceHeader(0x01, 0x01), sender=(1,), receiver=(2,))
    )
    assert rt.handle_frame(1, skip) == []
    # frames for a channel owned by another connection are ignored
    assert rt.handle_frame(2, login) == []


def test_frames_that_do_not_decode_are_dropped():
    rt = Runtime(SimConfig())
    assert rt.handle_frame(1, b"garbage") == []


# ---------------------------------------------------------------- logs and boot


def test_boot_log_lists_components(session):
    logs = session.fetch_logs()
    loaded = [e for e in logs if e.message.endswith("loaded")]
    assert {e.component for e in loaded} == {c.name for c in session.catalog.components.values()}
    assert len(loaded) == len(session.catalog.components)


def test_target_ident(session):
    ident = session.get_target_ident()
    assert ident["node_name"] == "plcfuzz-sim"
    assert ident["profile"] == "x32"


# ---------------------------------------------------------------- monitoring


def test_monitor_read_and_write(app_session):
    assert app_session.mem_read(0, 4) == bytes([0x0A, 0x00, 0x14, 0x00])
    app_session.mem_write(8, b"\xde\xad\xbe\xef")
    assert app_session.mem_read(8, 4) == b"\xde\xad\xbe\xef"
    app_session.mem_write(0, b"\x01")
    assert app_session.mem_read(0, 1) == b"\x01"


def test_monitor_write_program_without_fault_tag(app_session):
    program = monitor.write_program(8, 4)
    reply = app_session.send_command(0x1B, 0x02, [leaf(0x10, program), build_write_request(8, b"abcd")])
    assert reply.status == 0x00 and reply.find(0x41) is None


def test_monitor_fault_codes(app_session):
    reply = app_session.send_command(0x1B, 0x01, [leaf(0x10, monitor.read_program(0xFFF0, 0x40))])
    assert reply.find(0x41).data[0] == monitor.FAULT_BUFFER_OVERRUN
    reply = app_session.send_command(0x1B, 0x01, [leaf(0x10, monitor.read_program(0, 4, area=9))])
    assert reply.find(0x41).data[0] == monitor.FAULT_WRONG_POINTER
    reply = app_session.send_command(0x1B, 0x01, [leaf(0x10, b"\x7e")])
    assert reply.find(0x41).data[0] == monitor.FAULT_INVALID_OPCODE


def test_zero_length_write_is_parameter(app_session):
    reply = app_session.send_command(0x1B, 0x02, [leaf(0x10, monitor.write_program(0, 0)), build_write_request(0, b"")])
    assert reply.status == 0x02


def test_corrupted_canary_kills_runtime(sim, app_session, wait_until):
    sim.call(lambda rt: rt.corrupt_canary())
    with pytest.raises(ConnectionLost):
        app_session.mem_read(0, 4)
    assert wait_until(lambda: sim.deaths) and "canary" in sim.deaths[-1].detail


def test_interpreter_unit():
    areas = {0: bytearray(range(16))}
    out = monitor.interpret(monitor.read_program(4, 4), areas)
    assert out[0].tag_id == 0x40 and out[0].data == bytes([4, 5, 6, 7])
    with pytest.raises(monitor.CanaryViolation):
        monitor.interpret(monitor.read_program(0, 1), areas, canary=0)
    names = [m for m, _ in monitor.disassemble(monitor.read_program(4, 4))]
    assert "READ_AREA" in names


# ---------------------------------------------------------------- trace bug


def _record_add(session, value, width=4, **kw):
    return session.send_command(0x0F, 0x0D, seed_record_add_payload(value, width), **kw)


def test_record_add_outcomes_disarmed(session):
    assert _record_add(session, 0).status == 0x02
    assert _record_add(session, 0xFFFFFFFF).status == 0x02
    assert _record_add(session, 0x3000).status == 0x11
    assert _record_add(session, 0x1800).status == 0x11  # disarmed: no crash
    assert _record_add(session, 0x1800, width=8).status == 0x02  # x32 wants 4 bytes


def test_record_add_type_mismatch(session):
    forest = seed_record_add_payload()
    rec = forest[0]
    children = tuple(leaf(0x22, b"\x22\x00") if c.tag_id == 0x22 else c for c in rec.children)
    assert session.send_command(0x0F, 0x0D, [node(0x81, *children)]).status == 0x20


def test_record_add_crash_when_armed(make_sim, wait_until):
    sim = make_sim(bugs={"trace"})
    s = login_sequence(DriverConfig(port=sim.port))
    with pytest.raises(ConnectionLost):
        _record_add(s, 0x1800)
    s.close()
    assert wait_until(lambda: sim.boots == 2) and sim.deaths[0].component == "CmpTraceMgr"
    with login_sequence(DriverConfig(port=sim.port)) as again:
        logs = again.fetch_logs()
    assert any(e.severity >= 8 and "CmpTraceMgr" in e.message for e in logs)


def test_record_add_ok_with_trace_packet(make_sim):
    sim = make_sim(bugs={"trace"})
    with login_sequence(DriverConfig(port=sim.port)) as s:
        assert s.send_command(0x0F, 0x02, [node(0x81, leaf(0x21, b"T"))]).status == 0x00
        assert _record_add(s, 0x1800).status == 0x00


def test_x64_profile_accepts_eight_byte_values(make_sim):
    sim = make_sim(bugs={"trace"}, profile="x64")
    with login_sequence(DriverConfig(port=sim.port)) as s:
        assert _record_add(s, 0x1800, width=8).status == 0x11
        assert _record_add(s, 0x3000, width=4).status == 0x11
    s = login_sequence(DriverConfig(port=sim.port))
    with pytest.raises(ConnectionLost):
        _record_add(s, 0x1_0000_1800, width=8)
    s.close()


def test_aslr_slide_is_seeded_per_boot():
    slides = [Runtime(SimConfig(aslr_model=True, aslr_seed=7), boot_index=i).aslr_slide for i in range(20)]
    again = [Runtime(SimConfig(aslr_model=True, aslr_seed=7), boot_index=i).aslr_slide for i in range(20)]
    assert slides == again
    assert len(set(slides)) > 5
    assert all(s % 0x1000 == 0 and 0 <= s < 256 * 0x1000 for s in slides)
    assert Runtime(SimConfig()).aslr_slide == 0


# ---------------------------------------------------------------- nodename bug


def _rename(session, name: bytes):
    return session.send_command(0x01, 0x09, [leaf(0x58, name)])


def test_nodename_disarmed_validation(session):
    assert _rename(session, b"plc-a").status == 0x00
    assert _rename(session, b"\x01" * 10).status == 0x02
    assert _rename(session, b"a" * 65).status == 0x0F
    assert session.get_target_ident()["node_name"] == "plc-a"


def test_nodename_poison_persists(make_sim, tmp_path):
    cfg_file = tmp_path / "node.cfg"
    sim = make_sim(bugs={"nodename"}, node_config=str(cfg_file))
    cfg = DriverConfig(port=sim.port, open_timeout=0.3, reply_timeout=0.3)
    with login_sequence(cfg) as s:
        assert _rename(s, b"\x01" * 128).status == 0x00
        with pytest.raises(ReplyTimeout):
            s.get_target_ident()
    assert "nodename=" + "01" * 128 in cfg_file.read_text()
    with pytest.raises(OpenTimeout):
        DriverSession.connect(config=cfg)
    sim.reboot()
    with pytest.raises(OpenTimeout):
        DriverSession.connect(config=cfg)
    cfg_file.write_text("")
    sim.reboot()
    with login_sequence(cfg) as s:
        assert s.get_target_ident()["node_name"] == "plcfuzz-sim"


def test_node_store(tmp_path):
    path = tmp_path / "n.cfg"
    store = NodeStore(path)
    store.set("nodename", b"\x00ab")
    assert NodeStore(path).load() == {"nodename": b"\x00ab"}
    mem = NodeStore()
    mem.set("k", b"v")
    assert mem.load() == {"k": b"v"}


# ---------------------------------------------------------------- plcshell bug


def test_plcshell_commands(session):
    reply = session.plcshell("applist")
    assert [t.data for t in reply.tags if t.tag_id == 0x21] == [b"Application", b"bf_mmove_1", b"oob_1_arr_1"]
    assert session.plcshell("help").status == 0x00
    assert session.plcshell("mem").status == 0x00
    assert session.plcshell("bogus").status == 0x18


def test_plcshell_dump_window(session):
    reply = session.plcshell("dump", 0x100)
    assert reply.status == 0x00 and len(reply.find(0x20).data) == 128
    assert session.plcshell("dump", 0x2000 - 128 + 1).status == 0x1A


def test_plcshell_dump_past_window_kills_armed_runtime(make_sim, wait_until):
    sim = make_sim(bugs={"plcshell"})
    s = login_sequence(DriverConfig(port=sim.port))
    assert s.plcshell("dump", 0x2000 - 128).status == 0x00
    with pytest.raises(ConnectionLost):
        s.plcshell("dump", 0x2000 - 128 + 1)
    s.close()
    assert wait_until(lambda: sim.deaths) and sim.deaths[-1].component == "CmpPlcShell"


# ---------------------------------------------------------------- IEC apps


def test_app_state_machine(sim, app_session):
    assert app_session.read_status().state == "stopped"
    before = sim.call(lambda rt: rt.cycle_counter)
    assert app_session.app_control("single_cycle") == "stopped"
    assert sim.call(lambda rt: rt.cycle_counter) == before + 1
    assert app_session.app_control("start") == "running"
    st = app_session.read_status()
    assert st.state == "running" and st.cycles >= 2
    assert app_session.app_control("stop") == "stopped"


def test_bf_mmove_kills_runtime(sim, drv_config, wait_until):
    s = login_sequence(drv_config, "bf_mmove_1")
    s.mem_write(0, b"\xff\xff")
    with pytest.raises(ConnectionLost):
        s.app_control("single_cycle")
    s.close()
    assert wait_until(lambda: sim.deaths) and sim.deaths[-1].component == "bf_mmove_1"


def test_oob_app_exception_runtime_survives(sim, drv_config):
    with login_sequence(drv_config, "oob_1_arr_1") as s:
        s.mem_write(0, struct.pack("<H", 50))
        s.app_control("single_cycle")
        st = s.read_status()
        assert st.state == "exception" and st.exception
        assert s.app_control("reset") == "stopped"
        assert s.read_status().state == "stopped"
    assert sim.deaths == []


def test_benign_app_cycles(sim, app_session):
    for _ in range(5):
        app_session.mem_write(0, b"\x05\x00")
        assert app_session.app_control("single_cycle") == "stopped"
    assert app_session.read_status().cycles == 5


def test_app_info_and_areas(app_session):
    assert app_session.read_app_info() == [("in_a", 0, 2), ("in_b", 2, 2), ("in_buf", 4, 32)]
    areas = app_session.get_area_address()
    assert areas[0][1] == 0x10000
    assert set(app_session.read_app_list()) == {"Application", "bf_mmove_1", "oob_1_arr_1"}


# ---------------------------------------------------------------- server wrapper


def test_registry_json_matches_catalog(sim):
    entries = registry_json(sim.catalog)
    assert [(e["group"], e["command"]) for e in entries] == sim.catalog.registry()
    assert len(entries) == 92


def test_out_of_sync_stream_is_dropped(sim):
    with socket.create_connection(("127.0.0.1", sim.port), timeout=2) as raw:
        raw.sendall(b"\x00" * 32)
        assert raw.recv(10) == b""
    assert sim.serving and sim.loop_exits == 0


def test_stream_connection_reassembles_split_frames():
    rt = Runtime(SimConfig())
    stream = StreamConnection(lambda: rt, 1, wire.DEFAULT_BLOCK_MAGIC)
    data = wire.encode_frame(wire.channel_frame(wire.OPEN_REQUEST, sender=(1,), receiver=(2,)))
    out1, close1 = stream.feed(data[:5])
    out2, close2 = stream.feed(data[5:])
    assert (out1, close1, close2) == (b"", False, False)
    assert wire.decode_frame(out2).channel.command_id == wire.OPEN_CONFIRM


def test_restart_disabled_stops_server(make_sim, wait_until):
    sim = make_sim(bugs={"trace"}, restart=False)
    s = login_sequence(DriverConfig(port=sim.port))
    with pytest.raises(ConnectionLost):
        _record_add(s, 0x1800)
    s.close()
    assert wait_until(lambda: not sim.serving)


def test_total_cycles_sum_across_boots(sim, drv_config):
    with login_sequence(drv_config, "Application") as s:
        s.app_control("single_cycle")
    sim.reboot()
    with login_sequence(drv_config, "Application") as s:
        s.app_control("single_cycle")
    assert sim.total_cycles == 2


def test_sim_config_validation(tmp_path):
    with pytest.raises(ValueError):
        SimConfig(bugs={"nope"})
    with pytest.raises(ValueError):
        SimConfig(profile="arm")
    with pytest.raises(ValueError):
        SimConfig.from_dict({"colour": 1})
    path = tmp_path / "sim.toml"
    path.write_text('[sim]\nport = 1234\nbugs = ["trace"]\nprofile = "x64"\n')
    cfg = SimConfig.from_toml(path)
    assert cfg.port == 1234 and cfg.armed("trace") and cfg.profile == "x64"


def test_echo_round_trips_tags(session):
    forest = [node(0x81, leaf(0x01, b"abc"))]
    reply = session.send_command(0x01, 0x05, forest)
    assert reply.tags[1:] == forest
    assert decode_tags(encode_tags(reply.tags)) == reply.tags
    assert find(reply.tags, 0x01).data == b"abc"
