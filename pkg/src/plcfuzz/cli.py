"""Command line entry point (``plcfuzz`` / ``python3 -m plcfuzz``)."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__
from .catalog import CatalogError, default_catalog, load_catalog
from .driver import (
    DriverConfig,
    DriverError,
    ServiceReply,
    generate_exploit_template,
    login_sequence,
)
from .tags import TagError, decode_tags, pretty_print

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2


def _int(text: str) -> int:
    return int(text, 0)


def _range(text: str) -> tuple[int, int]:
    """``LO:HI`` (inclusive), both ends in any int base."""
    lo, sep, hi = text.partition(":")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected LO:HI, got {text!r}")
    return int(lo, 0), int(hi, 0)


def _read_toml(path: str | None, table: str) -> dict:
    if not path:
        return {}
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    return dict(doc.get(table, {}))


def _driver_config(args) -> DriverConfig:
    doc = _read_toml(getattr(args, "config", None), "driver")
    if args.host is not None:
        doc["host"] = args.host
    if args.port is not None:
        doc["port"] = args.port
    if args.timeout is not None:
        doc["reply_timeout"] = args.timeout
    return DriverConfig(**doc)


def _catalog(args):
    path = getattr(args, "catalog", None)
    return load_catalog(path) if path else default_catalog()


def _print_reply(reply: ServiceReply, catalog) -> None:
    seq = ", ".join(f"{layer}:{code:#x}" for layer, code in reply.status_sequence) or "-"
    name = catalog.status_name(reply.status) if reply.status is not None else None
    print(f"status: {name or '?'} ({seq})")
    if reply.tags:
        print(pretty_print(reply.tags, catalog))


# ------------------------------------------------------------------ client commands


def cmd_login(args) -> int:
    cfg = _driver_config(args)
    with login_sequence(cfg, args.app) as session:
        ident = session.get_target_ident()
        print(f"channel {session.channel_id} device session {session.device_session_id:#010x}")
        if args.app:
            print(f"app {args.app} session {session.app_session_id:#010x} handle {session.app_handle:#x}")
        for key, value in ident.items():
            print(f"  {key}: {value}")
    return EXIT_OK


def cmd_send_raw(args) -> int:
    from .fuzz.campaign import crash_monitor

    cfg = _driver_config(args)
    catalog = _catalog(args)
    payload = bytes.fromhex(args.hex)
    session = login_sequence(cfg, args.app, catalog=catalog)
    try:
        body = payload
        if args.app:
            # decode so the driver can re-bind the application session tag
            try:
                body = decode_tags(payload)
            except TagError:
                body = payload
        error = None
        reply = None
        try:
            reply = session.send_command(args.group, args.cmd, body)
        except DriverError as exc:
            error = exc
        if reply is not None:
            _print_reply(reply, catalog)
        if args.expect_crash:
            kind = crash_monitor(session, error, check_app=bool(args.app))
            if kind:
                print(f"crash reproduced: {kind}")
                return EXIT_OK
            print("no crash observed")
            return EXIT_FAIL
        if error is not None:
            print(f"error: {error}", file=sys.stderr)
            return EXIT_FAIL
        return EXIT_OK
    finally:
        session.close()


def _hexdump(data: bytes, base: int) -> str:
    lines = []
    for i in range(0, len(data), 16):
        chunk = data[i : i + 16]
        text = "".join(chr(b) if 0x20 <= b < 0x7F else "." for b in chunk)
        lines.append(f"{base + i:08x}  {chunk.hex(' '):<47}  {text}")
    return "\n".join(lines)


def cmd_memdump(args) -> int:
    with login_sequence(_driver_config(args), args.app) as session:
        data = session.memdump(args.start, args.len, area=args.area)
    if args.out:
        Path(args.out).write_bytes(data)
        print(f"wrote {len(data)} bytes to {args.out}")
    else:
        print(_hexdump(data, args.start))
    return EXIT_OK


def cmd_memwrite(args) -> int:
    with login_sequence(_driver_config(args), args.app) as session:
        session.mem_write(args.offset, bytes.fromhex(args.hex), area=args.area)
    print("ok")
    return EXIT_OK


def cmd_logs(args) -> int:
    with login_sequence(_driver_config(args)) as session:
        entries = session.fetch_logs()
    for e in entries:
        print(f"{e.timestamp:>12} sev={e.severity} {e.component or e.component_id}: {e.message}")
    return EXIT_OK


def cmd_app(args) -> int:
    with login_sequence(_driver_config(args), args.app) as session:
        if args.action == "status":
            st = session.read_status()
            print(f"state={st.state} cycles={st.cycles}" + (f" exception={st.exception}" if st.exception else ""))
        else:
            print(session.app_control(args.action))
    return EXIT_OK


# ------------------------------------------------------------------ fuzzing


def _write_exploits(out: Path, crashes) -> int:
    seen = set()
    for crash in crashes:
        if crash.dedup_key in seen:
            continue
        seen.add(crash.dedup_key)
        path = out / "exploits" / f"{crash.dedup_key}.sh"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(generate_exploit_template(crash))
        path.chmod(0o755)
    return len(seen)


def cmd_fuzz(args) -> int:
    from .fuzz.campaign import CampaignConfig, record_add_seed, run_campaign
    from .fuzz.records import load_seeds
    from .fuzz.triage import triage_report

    config = CampaignConfig.from_toml(args.config) if args.config else CampaignConfig()
    if args.out:
        config.out_dir = args.out
    if args.max_inputs is not None:
        config.max_inputs = args.max_inputs
    if args.duration is not None:
        config.duration = args.duration
    if args.port is not None:
        config.ports = (args.port,)
    seeds = load_seeds(args.seeds) if args.seeds else [record_add_seed()]
    if config.out_dir:
        Path(config.out_dir).mkdir(parents=True, exist_ok=True)
    result = run_campaign(config, seeds)
    if config.out_dir:
        out = Path(config.out_dir)
        (out / "stats.json").write_text(json.dumps(result.stats.to_json(), indent=2))
        _write_exploits(out, result.crashes)
    print(triage_report(result.crashes, result.stats), end="")
    return EXIT_OK


def cmd_discover(args) -> int:
    from .fuzz.campaign import discover_commands

    cfg = _driver_config(args)
    with login_sequence(cfg) as session:
        result = discover_commands(session, args.groups, args.cmds)
    if args.json:
        doc = {
            "valid": [list(r) for r in result.valid],
            "gated": {f"{g:#x},{c:#x}": why for (g, c), why in result.gated.items()},
            "probes": result.probes,
            "elapsed": round(result.elapsed, 3),
        }
        print(json.dumps(doc, indent=2))
    else:
        catalog = _catalog(args)
        for g, c in result.valid:
            spec = catalog.command(g, c)
            label = f"{spec.component}.{spec.name}" if spec else "?"
            print(f"{g:#06x} {c:#06x} {label}")
        print(f"{len(result.valid)} commands, {result.probes} probes, {result.elapsed:.2f}s")
    return EXIT_OK


def cmd_fuzz_app(args) -> int:
    from .fuzz.iec import IecFuzzConfig, fuzz_iec_app
    from .fuzz.triage import triage_report

    cfg = _driver_config(args)
    config = IecFuzzConfig(
        app=args.app,
        host=cfg.host,
        port=cfg.port,
        max_inputs=args.max_inputs,
        duration=args.duration,
        rng_seed=args.seed,
        reply_timeout=cfg.reply_timeout,
        stop_on_crash=args.stop_on_crash,
        out_dir=args.out,
    )
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
    result = fuzz_iec_app(config)
    if args.out:
        Path(args.out, "stats.json").write_text(json.dumps(result.stats.to_json(), indent=2))
    print(triage_report(result.crashes, result.stats), end="")
    return EXIT_OK


def cmd_report(args) -> int:
    from .fuzz.records import CampaignStats, CrashRecord, JsonlStore
    from .fuzz.triage import triage_report

    root = Path(args.dir) if args.dir else None
    crashes_path = Path(args.crashes) if args.crashes else root / "crashes.jsonl"
    crashes = JsonlStore.load(CrashRecord, crashes_path) if crashes_path.exists() else []
    stats = CampaignStats()
    stats_path = Path(args.stats) if args.stats else (root / "stats.json" if root else None)
    if stats_path and stats_path.exists():
        doc = json.loads(stats_path.read_text())
        for key, value in doc.items():
            if hasattr(stats, key) and key != "inputs_per_second":
                setattr(stats, key, value)
    print(triage_report(crashes, stats, "json" if args.json else "text"), end="")
    return EXIT_OK


# ------------------------------------------------------------------ simulator


def cmd_sim(args) -> int:
    from .sim import SimConfig, SimServer, registry_json

    catalog = _catalog(args)
    if args.action == "registry":
        entries = registry_json(catalog)
        if args.json:
            print(json.dumps(entries, indent=2))
        else:
            for e in entries:
                print(f"{e['group']:#06x} {e['command']:#06x} {e['component']}.{e['name']} [{e['session']}]")
        return EXIT_OK
    doc = _read_toml(args.config, "sim")
    if args.host is not None:
        doc["host"] = args.host
    if args.port is not None:
        doc["port"] = args.port
    if args.profile is not None:
        doc["profile"] = args.profile
    if args.bugs is not None:
        doc["bugs"] = [b for b in args.bugs.split(",") if b]
    if args.aslr_model is not None:
        doc["aslr_model"] = args.aslr_model == "on"
    if args.node_config is not None:
        doc["node_config"] = args.node_config
    config = SimConfig.from_dict(doc)
    server = SimServer(config, catalog).bind()
    host, port = server.address
    bugs = ",".join(sorted(config.bugs)) or "none"
    print(f"simulator listening on {host}:{port} profile={config.profile} bugs={bugs} aslr={'on' if config.aslr_model else 'off'}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return EXIT_OK


# ------------------------------------------------------------------ offline tools


def cmd_dissect(args) -> int:
    from .dissect import Capture, dissect

    capture = Capture.load(args.input, server_port=args.server_port)
    out = dissect(capture, _catalog(args), "json" if args.json else "text")
    sys.stdout.write(out if out.endswith("\n") else out + "\n")
    return EXIT_OK


def cmd_extract(args) -> int:
    from .dissect import Capture, extract_corpus
    from .fuzz.records import save_seeds

    capture = Capture.load(args.input, server_port=args.server_port)
    seeds = extract_corpus(capture, args.group, args.cmd, _catalog(args))
    save_seeds(args.out, seeds)
    print(f"{len(seeds)} seeds written to {args.out}")
    return EXIT_OK


def cmd_tag(args) -> int:
    from .dissect import HexError, tag_tool

    text = args.hex if args.hex is not None else sys.stdin.read()
    script = None
    if args.encode:
        script = Path(args.script).read_text() if args.script else "\n".join(args.set or [])
    try:
        print(tag_tool(text, script, _catalog(args)))
    except HexError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except TagError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_catalog(args) -> int:
    try:
        catalog = load_catalog(args.path)
    except CatalogError as exc:
        print(f"invalid: {exc}", file=sys.stderr)
        return EXIT_FAIL
    print(
        f"ok: {len(catalog.components)} components, {len(catalog.commands)} commands, "
        f"{len(catalog.statuses)} statuses, {len(catalog.opcodes)} opcodes"
    )
    return EXIT_OK


# ------------------------------------------------------------------ parser


def _client_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--host", default=None, help="target address (default 127.0.0.1)")
    p.add_argument("--port", type=int, default=None, help="target port (default 11740)")
    p.add_argument("--timeout", type=float, default=None, help="reply timeout in seconds")
    p.add_argument("--config", default=None, help="TOML file with a [driver] table")
    p.add_argument("--catalog", default=None, help="alternative catalog TOML")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plcfuzz", description="PLC runtime protocol fuzzing toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("login", help="open a channel, log in and print the target identity")
    _client_options(p)
    p.add_argument("--app", default=None)
    p.set_defaults(func=cmd_login)

    p = sub.add_parser("send-raw", help="send one service request with a hex payload")
    _client_options(p)
    p.add_argument("--group", type=_int, required=True)
    p.add_argument("--cmd", type=_int, required=True)
    p.add_argument("--hex", default="", help="tag-encoded payload")
    p.add_argument("--app", default=None, help="log in to this application first")
    p.add_argument("--expect-crash", action="store_true", help="exit 0 only if the target crashed")
    p.set_defaults(func=cmd_send_raw)

    p = sub.add_parser("memdump", help="read application memory")
    _client_options(p)
    p.add_argument("--start", type=_int, required=True)
    p.add_argument("--len", type=_int, required=True)
    p.add_argument("--area", type=_int, default=0)
    p.add_argument("--app", default="Application")
    p.add_argument("--out", default=None, help="write raw bytes here instead of a hexdump")
    p.set_defaults(func=cmd_memdump)

    p = sub.add_parser("memwrite", help="write application memory")
    _client_options(p)
    p.add_argument("--offset", type=_int, required=True)
    p.add_argument("--hex", required=True)
    p.add_argument("--area", type=_int, default=0)
    p.add_argument("--app", default="Application")
    p.set_defaults(func=cmd_memwrite)

    p = sub.add_parser("logs", help="print the runtime log")
    _client_options(p)
    p.set_defaults(func=cmd_logs)

    p = sub.add_parser("app", help="application execution control")
    _client_options(p)
    p.add_argument("action", choices=("start", "stop", "reset", "cycle", "status"))
    p.add_argument("--app", default="Application")
    p.set_defaults(func=cmd_app)

    p = sub.add_parser("fuzz", help="run a command fuzzing campaign")
    p.add_argument("--config", default=None, help="TOML file with a [campaign] table")
    p.add_argument("--seeds", default=None, help="seed corpus JSONL (default: built-in recordAdd seed)")
    p.add_argument("--out", default=None, help="output directory for paths, crashes and exploits")
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--max-inputs", type=int, default=None)
    p.add_argument("--duration", type=float, default=None)
    p.set_defaults(func=cmd_fuzz)

    p = sub.add_parser("discover", help="enumerate implemented commands")
    _client_options(p)
    p.add_argument("--groups", type=_range, default=(0, 0x130))
    p.add_argument("--cmds", type=_range, default=(0, 0x40))
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_discover)

    p = sub.add_parser("fuzz-app", help="fuzz an IEC application's input variables")
    _client_options(p)
    p.add_argument("--app", required=True)
    p.add_argument("--max-inputs", type=int, default=1000)
    p.add_argument("--duration", type=float, default=60.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stop-on-crash", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_fuzz_app)

    p = sub.add_parser("report", help="triage a crash store")
    p.add_argument("dir", nargs="?", default=None, help="campaign output directory")
    p.add_argument("--crashes", default=None)
    p.add_argument("--stats", default=None)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sim", help="run the reference runtime simulator")
    p.add_argument("action", nargs="?", choices=("serve", "registry"), default="serve")
    p.add_argument("--host", default=None)
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--profile", choices=("x32", "x64"), default=None)
    p.add_argument("--bugs", default=None, help="comma separated: trace,nodename,plcshell")
    p.add_argument("--aslr-model", choices=("off", "on"), default=None)
    p.add_argument("--node-config", default=None, help="persisted node settings file")
    p.add_argument("--config", default=None, help="TOML file with a [sim] table")
    p.add_argument("--catalog", default=None)
    p.add_argument("--json", action="store_true", help="registry: print JSON")
    p.set_defaults(func=cmd_sim)

    p = sub.add_parser("dissect", help="annotate a capture file")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--json", action="store_true")
    p.add_argument("--server-port", type=int, default=11740, help="pcap input: the runtime's port")
    p.add_argument("--catalog", default=None)
    p.set_defaults(func=cmd_dissect)

    p = sub.add_parser("extract", help="extract a seed corpus from a capture")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--group", type=_int, default=None)
    p.add_argument("--cmd", type=_int, default=None)
    p.add_argument("--server-port", type=int, default=11740)
    p.add_argument("--catalog", default=None)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("tag", help="decode or edit a tag-encoded payload (hex on stdin or --hex)")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--decode", action="store_true", help="print the tag tree (default)")
    mode.add_argument("--encode", action="store_true", help="apply edits and print the re-encoded hex")
    p.add_argument("--hex", default=None)
    p.add_argument("--script", default=None, help="edit script file: 'set PATH HEX' / 'del PATH' lines")
    p.add_argument("--set", action="append", metavar="'set PATH HEX'", help="inline edit line (repeatable)")
    p.add_argument("--catalog", default=None)
    p.set_defaults(func=cmd_tag)

    p = sub.add_parser("catalog", help="catalog utilities")
    csub = p.add_subparsers(dest="catalog_command", required=True)
    v = csub.add_parser("validate", help="validate a catalog file")
    v.add_argument("path")
    v.set_defaults(func=cmd_catalog)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DriverError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
