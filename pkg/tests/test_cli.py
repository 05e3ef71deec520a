"""Command line front end, driven in-process through ``main(argv)``."""

import io
import json
import os

import pytest

from plcfuzz.cli import main
from plcfuzz.dissect import Capture
from plcfuzz.driver import DriverConfig, DriverSession
from plcfuzz.fuzz.records import load_seeds
from plcfuzz.sim.runtime import seed_record_add_payload
from plcfuzz.tags import encode_tags

RECORD_ADD_HEX = encode_tags(seed_record_add_payload(0x3000)).hex()


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_login_prints_identity(sim, capsys):
    code, out, _ = run(capsys, "login", "--port", str(sim.port))
    assert code == 0 and "node_name" in out


def test_send_raw_shows_status(sim, capsys):
    code, out, _ = run(capsys, "send-raw", "--port", str(sim.port), "--group", "0x0f", "--cmd", "0x0d", "--hex", RECORD_ADD_HEX)
    assert code == 0 and "0x11" in out


def test_send_raw_expect_crash_without_crash(sim, capsys):
    code, out, _ = run(
        capsys, "send-raw", "--port", str(sim.port), "--group", "0x0f", "--cmd", "0x0d", "--hex", RECORD_ADD_HEX, "--expect-crash"
    )
    assert code == 1


def test_memwrite_then_memdump(sim, capsys):
    assert run(capsys, "memwrite", "--port", str(sim.port), "--offset", "0x20", "--hex", "c0ffee")[0] == 0
    code, out, _ = run(capsys, "memdump", "--port", str(sim.port), "--start", "0x20", "--len", "3")
    assert code == 0 and "c0 ff ee" in out.lower()


def test_memdump_to_file(sim, capsys, tmp_path):
    target = tmp_path / "dump.bin"
    assert run(capsys, "memdump", "--port", str(sim.port), "--start", "0", "--len", "300", "--out", str(target))[0] == 0
    assert target.stat().st_size == 300


def test_app_control(sim, capsys):
    assert "running" in run(capsys, "app", "start", "--port", str(sim.port))[1]
    assert "stopped" in run(capsys, "app", "stop", "--port", str(sim.port))[1]


def test_logs(sim, capsys):
    code, out, _ = run(capsys, "logs", "--port", str(sim.port))
    assert code == 0 and out.strip()


def test_discover_json(sim, capsys):
    code, out, _ = run(capsys, "discover", "--port", str(sim.port), "--groups", "0x0f:0x0f", "--cmds", "0:0x10", "--json")
    doc = json.loads(out)
    assert code == 0 and [0x0F, 0x0D] in [list(v) for v in doc["valid"]]


def test_sim_registry_json(capsys):
    code, out, _ = run(capsys, "sim", "registry", "--json")
    assert code == 0 and len(json.loads(out)) == 92


def test_connection_refused_exit_code(capsys):
    import socket

    with socket.socket() as probe:
        probe.bind(("127.0.0.1", 0))
        port = probe.getsockname()[1]
    assert run(capsys, "login", "--port", str(port))[0] == 1


def test_fuzz_writes_outputs_and_report(make_sim, capsys, tmp_path):
    sim = make_sim(bugs={"trace"})
    out_dir = tmp_path / "run"
    code, out, _ = run(capsys, "fuzz", "--port", str(sim.port), "--max-inputs", "1500", "--out", str(out_dir))
    assert code == 0 and "Campaign statistics" in out
    stats = json.loads((out_dir / "stats.json").read_text())
    assert stats["inputs_sent"] <= 1500
    scripts = list((out_dir / "exploits").glob("*.sh"))
    assert len(scripts) == stats["unique_crashes"]
    assert all(os.access(s, os.X_OK) for s in scripts)
    code, out, _ = run(capsys, "report", str(out_dir), "--json")
    assert code == 0 and json.loads(out)["stats"]["inputs_sent"] == stats["inputs_sent"]


def test_fuzz_app(sim, capsys):
    code, out, _ = run(capsys, "fuzz-app", "--port", str(sim.port), "--app", "Application", "--max-inputs", "20")
    assert code == 0 and "Total crashes" in out


def test_dissect_and_extract(sim, capsys, tmp_path):
    cap = Capture()
    with DriverSession.connect(config=DriverConfig(port=sim.port), recorder=cap.record) as s:
        s.device_login()
        s.send_command(0x0F, 0x0D, seed_record_add_payload(0x3000))
    cap.save(tmp_path / "cap.hex")
    code, out, _ = run(capsys, "dissect", "--in", str(tmp_path / "cap.hex"))
    assert code == 0 and "0 errors" in out
    code, out, _ = run(capsys, "dissect", "--in", str(tmp_path / "cap.hex"), "--json")
    assert json.loads(out)["summary"]["errors"] == 0
    seeds_path = tmp_path / "seeds.jsonl"
    assert run(capsys, "extract", "--in", str(tmp_path / "cap.hex"), "--out", str(seeds_path))[0] == 0
    assert [s.routing for s in load_seeds(seeds_path)] == [(0x0F, 0x0D)]


def test_tag_decode_from_stdin(capsys, monkeypatch):
    monkeypatch.setattr("sys.stdin", io.StringIO("7fff 02 0000\n"))
    code, out, _ = run(capsys, "tag")
    assert code == 0 and "Ok" in out


def test_tag_encode_with_inline_edit(capsys):
    code, out, _ = run(capsys, "tag", "--encode", "--hex", "1000 01 01", "--set", "set 0 ff")
    assert code == 0 and out.strip() == "100001ff"


def test_tag_odd_hex_fails(capsys):
    code, _, err = run(capsys, "tag", "--hex", "100")
    assert code == 1 and "odd number of hex digits at offset 2" in err


def test_catalog_validate(capsys, tmp_path):
    from importlib.resources import files

    code, out, _ = run(capsys, "catalog", "validate", str(files("plcfuzz") / "data" / "catalog.toml"))
    assert code == 0 and "92 commands" in out
    bad = tmp_path / "bad.toml"
    bad.write_text("[[status]\n")
    code, _, err = run(capsys, "catalog", "validate", str(bad))
    assert code == 1 and "invalid" in err
    assert run(capsys, "catalog", "validate", str(tmp_path / "missing.toml"))[0] == 2


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
