"""Offline dissection of captured traffic, seed extraction and the tag tool.

Two capture formats are supported:

* binary: the 8-byte header ``PLCCAP\\x00\\x01`` then records of
  ``direction:u8 timestamp:f64le length:u32le bytes[length]``
  (direction 0 = client, 1 = server);
* hexlines: one frame per line, ``C|S <timestamp> <hex>``; ``#`` starts a comment.

Classic libpcap files are accepted as well; TCP payloads are taken from IPv4
packets and the direction is decided by the runtime's port.
"""

from __future__ import annotations

import json
import re
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from . import wire
from .catalog import Catalog, default_catalog
from .fuzz.records import Seed
from .tags import (
    APP_SESSION_TAG,
    INTERP_FAULT_TAG,
    STATUS_TAG,
    Tag,
    TagError,
    as_uint,
    decode_tags,
    encode_tags,
    find_path,
    get_at,
    leaf,
    pretty_print,
    replace_at,
    walk,
)

BINARY_MAGIC = b"PLCCAP\x00\x01"
_RECORD = struct.Struct("<BdI")
DIRECTIONS = ("client", "server")
HANDSHAKE = {(0x01, 0x02), (0x01, 0x03), (0x02, 0x01), (0x02, 0x02)}


@dataclass
class CapturedFrame:
    direction: str
    timestamp: float
    data: bytes


@dataclass
class Capture:
    frames: list = field(default_factory=list)
    t0: float = field(default_factory=time.monotonic)

    def record(self, direction: str, data: bytes) -> None:
        """Recorder callback for :class:`plcfuzz.driver.DriverSession`."""
        self.frames.append(CapturedFrame(direction, time.monotonic() - self.t0, bytes(data)))

    def __len__(self) -> int:
        return len(self.frames)

    # -------------------------------------------------------------- io

    def to_binary(self) -> bytes:
        out = bytearray(BINARY_MAGIC)
        for f in self.frames:
            out += _RECORD.pack(DIRECTIONS.index(f.direction), f.timestamp, len(f.data)) + f.data
        return bytes(out)

    def to_hexlines(self) -> str:
        return "".join(f"{f.direction[0].upper()} {f.timestamp:.6f} {f.data.hex()}\n" for f in self.frames)

    def save(self, path: str | Path, fmt: str | None = None) -> None:
        path = Path(path)
        fmt = fmt or ("hexlines" if path.suffix in (".hex", ".txt") else "binary")
        if fmt == "hexlines":
            path.write_text(self.to_hexlines(), encoding="ascii")
        else:
            path.write_bytes(self.to_binary())

    @classmethod
    def from_bytes(cls, data: bytes, server_port: int = 11740) -> "Capture":
        if data.startswith(BINARY_MAGIC):
            return cls._parse_binary(data)
        if data[:4] in (b"\xd4\xc3\xb2\xa1", b"\xa1\xb2\xc3\xd4"):
            return read_pcap(data, server_port)
        return cls.from_hexlines(data.decode("ascii", errors="replace"))

    @classmethod
    def load(cls, path: str | Path, server_port: int = 11740) -> "Capture":
        return cls.from_bytes(Path(path).read_bytes(), server_port)

    @classmethod
    def _parse_binary(cls, data: bytes) -> "Capture":
        cap = cls(t0=0.0)
        pos = len(BINARY_MAGIC)
        while pos + _RECORD.size <= len(data):
            direction, ts, n = _RECORD.unpack_from(data, pos)
            pos += _RECORD.size
            cap.frames.append(CapturedFrame(DIRECTIONS[direction & 1], ts, data[pos : pos + n]))
            pos += n
        return cap

    @classmethod
    def from_hexlines(cls, text: str) -> "Capture":
        cap = cls(t0=0.0)
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3 or parts[0].upper() not in ("C", "S"):
                raise ValueError(f"hexlines line {lineno}: expected 'C|S TIMESTAMP HEX'")
            direction = "client" if parts[0].upper() == "C" else "server"
            cap.frames.append(CapturedFrame(direction, float(parts[1]), parse_hex(parts[2])))
        return cap


def read_pcap(data: bytes, server_port: int = 11740) -> Capture:
    """Minimal classic-pcap reader (Ethernet or raw IPv4, TCP only)."""
    magic = data[:4]
    endian = "<" if magic == b"\xd4\xc3\xb2\xa1" else ">"
    linktype = struct.unpack_from(endian + "I", data, 20)[0]
    cap = Capture(t0=0.0)
    pos = 24
    first_ts = None
    while pos + 16 <= len(data):
        sec, usec, incl, _orig = struct.unpack_from(endian + "IIII", data, pos)
        pos += 16
        pkt = data[pos : pos + incl]
        pos += incl
        ts = sec + usec / 1e6
        first_ts = ts if first_ts is None else first_ts
        off = 14 if linktype == 1 else 0
        if linktype == 1 and pkt[12:14] != b"\x08\x00":
            continue
        ip = pkt[off:]
        if len(ip) < 20 or ip[0] >> 4 != 4 or ip[9] != 6:
            continue
        ihl = (ip[0] & 0x0F) * 4
        total = struct.unpack_from(">H", ip, 2)[0]
        tcp = ip[ihl:total]
        if len(tcp) < 20:
            continue
        sport, dport = struct.unpack_from(">HH", tcp, 0)
        payload = tcp[(tcp[12] >> 4) * 4 :]
        if not payload:
            continue
        direction = "client" if dport == server_port else "server" if sport == server_port else None
        if direction:
            cap.frames.append(CapturedFrame(direction, ts - first_ts, bytes(payload)))
    return cap


# ------------------------------------------------------------------ hex helpers


class HexError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


def parse_hex(text: str) -> bytes:
    """Strict hex parser that ignores whitespace and reports the failing offset."""
    digits = []
    for i, ch in enumerate(text):
        if ch.isspace():
            continue
        if ch not in "0123456789abcdefABCDEF":
            raise HexError(f"invalid hex digit {ch!r}", i)
        digits.append((i, ch))
    if len(digits) % 2:
        raise HexError("odd number of hex digits", digits[-1][0])
    return bytes(int(digits[i][1] + digits[i + 1][1], 16) for i in range(0, len(digits), 2))


# ------------------------------------------------------------------ dissection


def _tag_json(forest: Sequence[Tag], catalog: Catalog) -> list[dict]:
    out = []
    for tag in forest:
        doc: dict = {"id": tag.tag_id}
        if tag.is_complex:
            doc["children"] = _tag_json(tag.children, catalog)
        else:
            doc["data"] = tag.data.hex()
            if tag.tag_id == STATUS_TAG and len(tag.data) >= 2:
                doc["status"] = catalog.status_name(as_uint(tag.data[:2]))
            elif tag.tag_id == INTERP_FAULT_TAG and tag.data:
                doc["interpreter"] = catalog.interp_name(tag.data[0])
        out.append(doc)
    return out


def _statuses(forest: Sequence[Tag], catalog: Catalog) -> list[dict]:
    out = []
    for _, tag in walk(forest):
        if tag.tag_id == STATUS_TAG and len(tag.data) >= 2:
            code = as_uint(tag.data[:2])
            out.append({"layer": "service", "code": code, "name": catalog.status_name(code)})
        elif tag.tag_id == INTERP_FAULT_TAG and tag.data:
            out.append({"layer": "monitor", "code": tag.data[0], "name": catalog.interp_name(tag.data[0])})
    return out


def dissect_frame(data: bytes, catalog: Catalog, block_magic: int = wire.DEFAULT_BLOCK_MAGIC) -> dict:
    """Decode one frame as far as possible; failures are reported, never raised."""
    doc: dict = {"length": len(data)}
    try:
        frame, region = wire.decode_outer(data, block_magic)
    except wire.FrameError as exc:
        doc["error"] = {"layer": exc.layer, "message": str(exc), "hex": data.hex()}
        return doc
    dg, ch = frame.datagram, frame.channel
    doc["block"] = {"magic": frame.block.magic, "length": frame.block.length}
    doc["datagram"] = {
        "hop_count": dg.hop_count,
        "hop_flags": dg.hop_flags,
        "packet_settings": dg.packet_settings,
        "service_id": dg.service_id,
        "sender": list(dg.sender),
        "receiver": list(dg.receiver),
    }
    doc["channel"] = {
        "command": ch.command_id,
        "command_name": wire.CHANNEL_COMMANDS.get(ch.command_id),
        "flags": ch.flags,
        "channel_id": ch.channel_id,
        "blk_id": ch.blk_id,
        "ack_id": ch.ack_id,
        "remaining_data_size": ch.remaining_data_size,
        "checksum": ch.checksum,
    }
    doc["leftover"] = len(frame.leftover)
    if not region:
        return doc
    try:
        svc = wire.decode_service(region)
    except wire.FrameError as exc:
        doc["error"] = {"layer": exc.layer, "message": str(exc), "hex": region.hex()}
        return doc
    spec = catalog.command(svc.service_group, svc.command_id)
    doc["service"] = {
        "protocol_id": svc.protocol_id,
        "header_size": svc.header_size,
        "group": svc.service_group,
        "group_name": catalog.component_name(svc.service_group),
        "command": svc.command_id,
        "command_name": spec.name if spec else None,
        "session_id": svc.session_id,
        "content_size": svc.content_size,
        "additional_data": svc.additional_data.hex(),
    }
    try:
        forest = decode_tags(svc.protocol_data)
    except TagError as exc:
        doc["error"] = {"layer": "tags", "message": str(exc), "hex": svc.protocol_data.hex()}
        return doc
    doc["tags"] = _tag_json(forest, catalog)
    doc["statuses"] = _statuses(forest, catalog)
    doc["_forest"] = forest
    return doc


def _split(cap: Capture, block_magic: int) -> Iterable[tuple[CapturedFrame, bytes, bytes]]:
    """Yield (record, frame bytes, trailing garbage) handling records holding several frames."""
    for rec in cap.frames:
        try:
            frames, rest = wire.split_frames(rec.data, block_magic)
        except wire.FrameError:
            frames, rest = [], rec.data
        if not frames:
            yield rec, rec.data, b""
            continue
        for i, f in enumerate(frames):
            yield rec, f, rest if i == len(frames) - 1 else b""


def dissect(capture: Capture, catalog: Catalog | None = None, fmt: str = "text", block_magic: int = wire.DEFAULT_BLOCK_MAGIC):
    """Annotate every frame.  ``fmt`` is ``"text"``, ``"json"`` (string) or ``"dict"``."""
    catalog = catalog or default_catalog()
    frames = []
    summary = {"frames": 0, "decoded": 0, "errors": 0, "leftover_bytes": 0, "unresolved_statuses": 0}
    for index, (rec, data, trailing) in enumerate(_split(capture, block_magic)):
        doc = dissect_frame(data, catalog, block_magic)
        doc.update(index=index, direction=rec.direction, timestamp=rec.timestamp)
        if trailing:
            doc["leftover"] = doc.get("leftover", 0) + len(trailing)
        summary["frames"] += 1
        summary["errors"] += "error" in doc
        summary["decoded"] += "error" not in doc
        summary["leftover_bytes"] += doc.get("leftover", 0)
        summary["unresolved_statuses"] += sum(1 for s in doc.get("statuses", ()) if s["name"] is None)
        frames.append(doc)
    if fmt == "dict":
        return {"summary": summary, "frames": frames}
    if fmt == "json":
        clean = [{k: v for k, v in f.items() if not k.startswith("_")} for f in frames]
        return json.dumps({"summary": summary, "frames": clean}, indent=2, sort_keys=True)
    return _render_text(frames, summary, catalog)


def _render_text(frames: list[dict], summary: dict, catalog: Catalog) -> str:
    lines = []
    for f in frames:
        lines.append(f"#{f['index']} {f['direction']} t={f['timestamp']:.6f} len={f['length']}")
        if "block" in f:
            b = f["block"]
            lines.append(f"  block     magic={b['magic']:#010x} length={b['length']}")
        if "datagram" in f:
            d = f["datagram"]
            addr = lambda units: ".".join(f"{u:04x}" for u in units) or "-"  # noqa: E731
            lines.append(
                f"  datagram  hops={d['hop_count']} flags={d['hop_flags']} settings={d['packet_settings']:#04x} "
                f"service={d['service_id']:#04x} sender={addr(d['sender'])} receiver={addr(d['receiver'])}"
            )
        if "channel" in f:
            c = f["channel"]
            name = c["command_name"] or f"cmd {c['command']:#04x}"
            lines.append(
                f"  channel   {name} flags={c['flags']:#04x} channel={c['channel_id']} blk={c['blk_id']} "
                f"ack={c['ack_id']} remaining={c['remaining_data_size']} crc={c['checksum']:#010x}"
            )
        if "service" in f:
            s = f["service"]
            group = f"{s['group_name']} ({s['group']:#06x})" if s["group_name"] else f"group {s['group']:#06x}"
            cmd = f"{s['command_name']} ({s['command']:#06x})" if s["command_name"] else f"command {s['command']:#06x}"
            lines.append(
                f"  service   {group} / {cmd} session={s['session_id']:#010x} "
                f"header={s['header_size']} content={s['content_size']}"
            )
        if "_forest" in f and f["_forest"]:
            lines.append("  tags")
            lines.append(pretty_print(f["_forest"], catalog, indent=2))
        if f.get("leftover"):
            lines.append(f"  leftover  {f['leftover']} bytes")
        if "error" in f:
            e = f["error"]
            lines.append(f"  undecodable at {e['layer']} layer: {e['message']}")
            lines.append(f"    {e['hex']}")
    lines.append(
        "summary: {frames} frames, {decoded} decoded, {errors} errors, "
        "{leftover_bytes} leftover bytes, {unresolved_statuses} unresolved statuses".format(**summary)
    )
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------ corpus extraction


@dataclass
class Exchange:
    request: wire.PacketFrame
    reply: wire.PacketFrame | None


def exchanges(capture: Capture, block_magic: int = wire.DEFAULT_BLOCK_MAGIC) -> list[Exchange]:
    """Pair each client service frame with the server BLK that acknowledges it."""
    out: list[Exchange] = []
    pending: dict[int, Exchange] = {}
    for rec, data, _ in _split(capture, block_magic):
        try:
            frame = wire.decode_frame(data, block_magic)
        except wire.FrameError:
            continue
        if frame.channel.command_id != wire.BLK or frame.service is None:
            continue
        if rec.direction == "client":
            ex = Exchange(frame, None)
            pending[frame.channel.blk_id] = ex
            out.append(ex)
        else:
            ex = pending.pop(frame.channel.ack_id, None)
            if ex is not None:
                ex.reply = frame
    return out


def extract_corpus(
    capture: Capture,
    group: int | None = None,
    command: int | None = None,
    catalog: Catalog | None = None,
    block_magic: int = wire.DEFAULT_BLOCK_MAGIC,
) -> list[Seed]:
    """Turn client service frames into seeds.

    Login and logout handshakes are skipped; the driver replays them itself.
    The application session tag is removed so the driver re-binds it when the
    seed is sent, and the device session id is not stored at all.
    """
    catalog = catalog or default_catalog()
    seeds: list[Seed] = []
    seen: set[str] = set()
    app: str | None = None
    for ex in exchanges(capture, block_magic):
        svc = ex.request.service
        key = (svc.service_group, svc.command_id)
        try:
            forest = decode_tags(svc.protocol_data)
        except TagError:
            continue
        if key == (0x02, 0x01):
            name = find_path(forest, (0x02,))
            if name is not None:
                app = name.data.decode("utf-8", errors="replace")
        if key in HANDSHAKE:
            continue
        if group is not None and svc.service_group != group:
            continue
        if command is not None and svc.command_id != command:
            continue
        spec = catalog.command(*key)
        session = spec.session if spec else "device"
        stages: set = set()
        if session != "none" or svc.session_id:
            stages.add("device_login")
        seed_app = None
        if session in ("app", "app_rights"):
            stages.add("app_login")
            seed_app = app
            forest = [t for t in forest if t.tag_id != APP_SESSION_TAG]
        seed = Seed(svc.service_group, svc.command_id, forest, f"capture:{ex.request.channel.blk_id}", frozenset(stages), seed_app)
        if seed.seed_id in seen:
            continue
        seen.add(seed.seed_id)
        seeds.append(seed)
    return seeds


# ------------------------------------------------------------------ tag tool


_EDIT = re.compile(r"^\s*(set|del)\s+(\S+)(?:\s+(\S+))?\s*$")


def _resolve(forest: Sequence[Tag], spec: str) -> tuple[int, ...]:
    """``spec`` is an id path (``0x81/0x40``) or an index path (``0.5.0``)."""
    if "/" in spec or spec.lower().startswith("0x"):
        ids = [int(p, 0) for p in spec.split("/")]
        for path, tag in walk(forest):
            if tag.tag_id == ids[-1] and find_path(forest, ids) is tag:
                return path
        raise KeyError(f"no tag at {spec}")
    path = tuple(int(p) for p in spec.split("."))
    get_at(forest, path)
    return path


def apply_edits(forest: Sequence[Tag], script: str) -> list[Tag]:
    """Apply an edit script: ``set PATH HEX`` replaces leaf data, ``del PATH`` drops a tag."""
    out = list(forest)
    for lineno, line in enumerate(script.splitlines(), 1):
        line = line.split("#", 1)[0]
        if not line.strip():
            continue
        m = _EDIT.match(line)
        if not m:
            raise ValueError(f"edit script line {lineno}: expected 'set PATH HEX' or 'del PATH'")
        op, spec, value = m.groups()
        path = _resolve(out, spec)
        if op == "set":
            if value is None:
                raise ValueError(f"edit script line {lineno}: set needs a hex value")
            target = get_at(out, path)
            if target.is_complex:
                out = replace_at(out, path, Tag(target.tag_id, children=tuple(decode_tags(parse_hex(value)))))
            else:
                out = replace_at(out, path, leaf(target.tag_id, parse_hex(value)))
        else:
            out = _delete(out, path)
    return out


def _delete(forest: Sequence[Tag], path: Sequence[int]) -> list[Tag]:
    out = list(forest)
    if len(path) == 1:
        del out[path[0]]
        return out
    parent = out[path[0]]
    out[path[0]] = Tag(parent.tag_id, children=tuple(_delete(parent.children, path[1:])))
    return out


def tag_tool(hex_text: str, script: str | None = None, catalog: Catalog | None = None) -> str:
    """Decode mode (no script): pretty tree.  Edit mode: re-encoded hex."""
    data = parse_hex(hex_text)
    forest = decode_tags(data)
    if script is None:
        return pretty_print(forest, catalog or default_catalog())
    return encode_tags(apply_edits(forest, script)).hex()
