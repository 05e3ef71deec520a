"""Dissector, capture formats, corpus extraction and the tag tool."""

import json
import struct

import pytest

from plcfuzz import wire
from plcfuzz.dissect import (
    Capture,
    HexError,
    apply_edits,
    dissect,
    exchanges,
    extract_corpus,
    parse_hex,
    read_pcap,
    tag_tool,
)
from plcfuzz.driver import DriverConfig, DriverSession, status_sequence
from plcfuzz.fuzz.campaign import establish, replay_status
from plcfuzz.sim.runtime import seed_record_add_payload
from plcfuzz.tags import decode_tags, encode_tags, find_path, leaf


@pytest.fixture
def capture(sim):
    """Traffic of a short session: login, recordAdd, a monitor read, an unknown group and a keepalive."""
    cap = Capture()
    s = DriverSession.connect(config=DriverConfig(port=sim.port, reply_timeout=1.0), recorder=cap.record)
    s.device_login()
    s.send_command(0x0F, 0x0D, seed_record_add_payload(0x3000))
    s.send_command(0x99, 0x01)
    s.app_login("Application")
    s.mem_read(0, 16)
    s.keepalive_tick()
    s.close()
    return cap


# ---------------------------------------------------------------- capture files


def test_binary_and_hexlines_round_trip(capture, tmp_path):
    for name in ("cap.bin", "cap.hex"):
        capture.save(tmp_path / name)
        again = Capture.load(tmp_path / name)
        assert [f.data for f in again.frames] == [f.data for f in capture.frames]
        assert [f.direction for f in again.frames] == [f.direction for f in capture.frames]


def test_hexlines_comments_and_errors():
    cap = Capture.from_hexlines("# header\nC 0.5 0102  # trailing\n\nS 1.0 03\n")
    assert [(f.direction, f.data) for f in cap.frames] == [("client", b"\x01\x02"), ("server", b"\x03")]
    with pytest.raises(ValueError):
        Capture.from_hexlines("X 0 00\n")


def _pcap(packets, server_port=11740):
    """Hand-built classic pcap with Ethernet + IPv4 + TCP headers around each payload."""
    out = bytearray(struct.pack("<IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, 65535, 1))
    for i, (to_server, payload) in enumerate(packets):
        sport, dport = (40000, server_port) if to_server else (server_port, 40000)
        tcp = struct.pack(">HHIIBBHHH", sport, dport, 0, 0, 5 << 4, 0x18, 1024, 0, 0)
        ip_len = 20 + len(tcp) + len(payload)
        ip = struct.pack(">BBHHHBBH4s4s", 0x45, 0, ip_len, 0, 0, 64, 6, 0, b"\x7f\0\0\1", b"\x7f\0\0\1")
        eth = b"\x00" * 12 + b"\x08\x00"
        pkt = eth + ip + tcp + payload
        out += struct.pack("<IIII", 100 + i, 0, len(pkt), len(pkt)) + pkt
    return bytes(out)


def test_pcap_reader(capture):
    packets = [(f.direction == "client", f.data) for f in capture.frames]
    cap = read_pcap(_pcap(packets))
    assert [f.data for f in cap.frames] == [f.data for f in capture.frames]
    assert [f.direction for f in cap.frames] == [f.direction for f in capture.frames]
    assert Capture.from_bytes(_pcap(packets)).frames[0].timestamp == 0.0


def test_parse_hex_errors():
    assert parse_hex("de ad\nbe ef") == b"\xde\xad\xbe\xef"
    with pytest.raises(HexError) as exc:
        parse_hex("0z")
    assert exc.value.offset == 1
    with pytest.raises(HexError) as exc:
        parse_hex("abc")
    assert exc.value.offset == 2 and "odd" in str(exc.value)


# ---------------------------------------------------------------- dissection


def test_every_frame_decodes(capture):
    doc = dissect(capture, fmt="dict")
    s = doc["summary"]
    assert s["frames"] == len(capture.frames)
    assert s["errors"] == 0 and s["leftover_bytes"] == 0 and s["unresolved_statuses"] == 0


def test_unknown_group_is_numeric(capture):
    doc = dissect(capture, fmt="dict")
    svc = [f["service"] for f in doc["frames"] if f.get("service", {}).get("group") == 0x99]
    assert svc and svc[0]["group_name"] is None and svc[0]["command_name"] is None
    text = dissect(capture)
    assert "group 0x0099 / command 0x0001" in text


def test_keepalive_has_no_service(capture):
    doc = dissect(capture, fmt="dict")
    keepalives = [f for f in doc["frames"] if f["channel"]["command"] == wire.KEEPALIVE]
    assert keepalives and all("service" not in f for f in keepalives)


def test_status_names_resolved(capture):
    doc = json.loads(dissect(capture, fmt="json"))
    names = {s["name"] for f in doc["frames"] for s in f.get("statuses", ())}
    assert {"Ok", "L7UnknownCmdGrp"} <= names


def test_garbage_reported_not_raised():
    cap = Capture.from_hexlines("C 0 deadbeef00\n")
    doc = dissect(cap, fmt="dict")
    assert doc["summary"]["errors"] == 1
    assert doc["frames"][0]["error"]["hex"] == "deadbeef00"
    assert "undecodable" in dissect(cap)


def test_exchanges_pair_requests(capture):
    pairs = exchanges(capture)
    assert pairs and all(p.reply is not None for p in pairs)
    for p in pairs:
        assert p.reply.channel.ack_id == p.request.channel.blk_id


# ---------------------------------------------------------------- extraction


def test_record_add_extracts_one_seed(capture):
    seeds = extract_corpus(capture, group=0x0F, command=0x0D)
    assert len(seeds) == 1
    assert seeds[0].tags == seed_record_add_payload(0x3000)
    assert seeds[0].provenance.startswith("capture:")


def test_handshakes_skipped_and_app_tag_stripped(capture):
    seeds = extract_corpus(capture)
    routings = {s.routing for s in seeds}
    assert not routings & {(0x01, 0x02), (0x02, 0x01)}
    app_seeds = [s for s in seeds if "app_login" in s.stage_requirements]
    assert app_seeds and all(s.app == "Application" for s in app_seeds)
    assert all(find_path(s.tags, (0x01,)) is None for s in app_seeds)


def test_filter_without_matches(capture):
    assert extract_corpus(capture, group=0x02, command=0x10) == []


def test_server_frames_never_become_seeds(capture):
    only_server = Capture(frames=[f for f in capture.frames if f.direction == "server"])
    assert extract_corpus(only_server) == []


def test_replay_reproduces_statuses(capture, make_sim):
    fresh = make_sim()
    recorded = {}
    for ex in exchanges(capture):
        key = (ex.request.service.service_group, ex.request.service.command_id)
        recorded.setdefault(key, tuple(status_sequence(decode_tags(ex.reply.service.protocol_data))))
    for seed in extract_corpus(capture):
        with establish(DriverConfig(port=fresh.port), seed.stage_requirements, seed.app) as s:
            assert replay_status(s, seed) == recorded[seed.routing]


# ---------------------------------------------------------------- tag tool


def _diff(a: bytes, b: bytes) -> list[int]:
    return [i for i in range(len(a)) if a[i] != b[i]]


def test_same_width_edit_changes_only_leaf_bytes():
    forest = seed_record_add_payload(0x3000)
    before = encode_tags(forest)
    after = bytes.fromhex(tag_tool(before.hex(), "set 0x81/0x40 efbeadde"))
    assert len(after) == len(before)
    changed = _diff(before, after)
    assert len(changed) <= 4 and changed == list(range(changed[0], changed[0] + len(changed)))
    start = before.find(struct.pack("<I", 0x3000))
    assert after[start : start + 4] == b"\xef\xbe\xad\xde"


def test_wider_edit_grows_enclosing_sizes_only():
    forest = seed_record_add_payload(0x3000)
    before = encode_tags(forest)
    after = bytes.fromhex(tag_tool(before.hex(), "set 0x81/0x40 0011223344556677"))
    assert len(after) == len(before) + 4
    start = before.find(struct.pack("<I", 0x3000))
    # bytes before the leaf differ only at the size fields of the enclosing tags
    changed = _diff(before[:start], after[:start])
    sizes = [i for i in changed if before[i] + 4 == after[i]]
    assert changed == sizes and 1 <= len(changed) <= 3
    assert after[start : start + 8] == bytes.fromhex("0011223344556677")
    assert after[start + 8 :] == before[start + 4 :]


def test_index_path_and_delete():
    forest = [leaf(0x10, b"\x01"), leaf(0x11, b"\x02")]
    assert apply_edits(forest, "set 1 ff") == [leaf(0x10, b"\x01"), leaf(0x11, b"\xff")]
    assert apply_edits(forest, "# drop\ndel 0") == [leaf(0x11, b"\x02")]
    with pytest.raises(ValueError):
        apply_edits(forest, "move 0")


def test_decode_mode_pretty_prints():
    text = tag_tool(encode_tags([leaf(0xFF7F, b"\x00\x00")]).hex())
    assert "Ok" in text
    with pytest.raises(HexError):
        tag_tool("7f ff 0")
