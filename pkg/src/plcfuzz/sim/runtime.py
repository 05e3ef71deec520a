"""Simulated control runtime: channel layer, session gates, components and seeded bugs.

A :class:`Runtime` is one boot of the simulated device.  It is a pure state
machine over frames: :meth:`Runtime.handle_frame` takes the raw bytes of one
request frame and returns the raw reply frames.  Networking and the restart
wrapper live in :mod:`plcfuzz.sim.server`.

A simulated crash is signalled by raising :class:`RuntimeDeath`; the caller is
expected to drop every connection and boot a fresh :class:`Runtime`.
"""

from __future__ import annotations

import random
import struct
import sys
import time
from collections import deque
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .. import monitor, wire
from ..catalog import Catalog, CommandSpec, default_catalog
from ..tags import (
    APP_SESSION_TAG,
    INTERP_FAULT_TAG,
    PROGRAM_TAG,
    STATUS_TAG,
    WRITE_REQUEST_TAG,
    Tag,
    TagError,
    as_uint,
    decode_tags,
    encode_tags,
    find,
    leaf,
    node,
    parse_write_request,
    u16,
    u32,
)
from .apps import BUILTIN_APPS, EXCEPTION, RUNNING, STATE_CODES, STOPPED, AppFault, SimApp

BUGS = ("trace", "nodename", "plcshell")
PAGE = 0x1000

# log severities
INFO = 1
WARNING = 2
ERROR = 4
EXCEPTION_SEVERITY = 8

MAX_CHANNELS_KEY = "CmpChannelServer.MaxChannels"
CYCLE_TIME_KEY = "SysTask.CycleTimeMs"
NODE_NAME_LIMIT = 64


class RuntimeDeath(Exception):
    """The simulated runtime process died; all connections must be dropped."""

    def __init__(self, component: str, detail: str):
        super().__init__(f"{component}: {detail}")
        self.component = component
        self.detail = detail


@dataclass
class SimConfig:
    host: str = "127.0.0.1"
    port: int = 11740
    profile: str = "x32"
    bugs: frozenset = frozenset()
    aslr_model: bool = False
    aslr_seed: int | None = None
    aslr_pages: int = 256
    crash_window: tuple = (0x1000, 0x2000)
    crash_window_x64: tuple = (0x1_0000_1000, 0x1_0000_2000)
    max_channels: int = 4
    channel_timeout: float = 10.0
    area0_size: int = 0x10000
    area3_size: int = 0x1000
    shell_window: int = 0x2000
    apps: tuple = tuple(BUILTIN_APPS)
    mmove_severity: str = "runtime"
    oob_severity: str = "app"
    node_config: str | None = None
    block_magic: int = wire.DEFAULT_BLOCK_MAGIC
    log_capacity: int = 512
    restart: bool = True
    restart_delay: float = 0.0
    node_name: str = "plcfuzz-sim"

    def __post_init__(self):
        self.bugs = frozenset(self.bugs)
        unknown = self.bugs - set(BUGS)
        if unknown:
            raise ValueError(f"unknown bug ids {sorted(unknown)}; known: {', '.join(BUGS)}")
        if self.profile not in ("x32", "x64"):
            raise ValueError(f"profile must be x32 or x64, not {self.profile!r}")
        for sev in (self.mmove_severity, self.oob_severity):
            if sev not in ("app", "runtime"):
                raise ValueError(f"severity must be 'app' or 'runtime', not {sev!r}")
        self.crash_window = tuple(self.crash_window)
        self.crash_window_x64 = tuple(self.crash_window_x64)
        self.apps = tuple(self.apps)

    def armed(self, bug: str) -> bool:
        return bug in self.bugs

    @classmethod
    def from_dict(cls, doc: dict) -> "SimConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ValueError(f"unknown simulator settings: {', '.join(sorted(unknown))}")
        return cls(**doc)

    @classmethod
    def from_toml(cls, path: str | Path) -> "SimConfig":
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
        return cls.from_dict(doc.get("sim", doc))


class NodeStore:
    """Persistent ``key=hexvalue`` settings that survive simulated reboots.

    With a ``path`` the values live in a plain text file, otherwise in memory
    owned by whoever keeps the store object across boots.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self._mem: dict[str, bytes] = {}

    def load(self) -> dict[str, bytes]:
        if self.path is None:
            return dict(self._mem)
        if not self.path.exists():
            return {}
        out = {}
        for line in self.path.read_text(encoding="ascii", errors="replace").splitlines():
            key, sep, value = line.strip().partition("=")
            if not sep or not key:
                continue
            try:
                out[key.strip()] = bytes.fromhex(value.strip())
            except ValueError:
                continue
        return out

    def set(self, key: str, value: bytes) -> None:
        if self.path is None:
            self._mem[key] = bytes(value)
            return
        data = self.load()
        data[key] = bytes(value)
        self.path.write_text("".join(f"{k}={v.hex()}\n" for k, v in sorted(data.items())), encoding="ascii")


@dataclass
class LogEntry:
    timestamp: int
    component_id: int
    severity: int
    message: str
    component: str = ""


@dataclass
class Channel:
    channel_id: int
    conn_id: int
    last_activity: float
    client_blk: int = 0
    server_blk: int = 0
    ack_offset: int = 0
    device_session: int | None = None
    app_sessions: set = field(default_factory=set)
    cached_blk: int | None = None
    cached_reply: list = field(default_factory=list)


@dataclass
class AppSession:
    session_id: int
    handle: int
    app: str
    channel_id: int


class _NoReply(Exception):
    """Handler decided the request goes unanswered."""


@dataclass
class Request:
    channel: Channel
    service: wire.ServiceHeader
    forest: list
    spec: CommandSpec
    app_session: AppSession | None = None


def _ascii(data: bytes) -> str:
    return data.decode("utf-8", errors="replace").strip("\x00").strip()


def _text(value: str) -> bytes:
    return value.encode("utf-8")


def node_name_poisoned(name: bytes) -> bool:
    return len(name) > NODE_NAME_LIMIT and any(b < 0x20 for b in name)


class Runtime:
    def __init__(
        self,
        config: SimConfig | None = None,
        catalog: Catalog | None = None,
        *,
        boot_index: int = 0,
        store: NodeStore | None = None,
        crash_note: RuntimeDeath | None = None,
        clock: Callable[[], float] = time.monotonic,
    ):
        self.config = config or SimConfig()
        self.catalog = catalog or default_catalog()
        self.boot_index = boot_index
        self.store = store or NodeStore(self.config.node_config)
        self.clock = clock
        self.channels: dict[int, Channel] = {}
        self.device_sessions: dict[int, int] = {}
        self.app_sessions: dict[int, AppSession] = {}
        self.trace_packets: dict[int, dict[int, list]] = {}
        self.log_ring: deque[LogEntry] = deque(maxlen=self.config.log_capacity)
        self.canary = monitor.CANARY
        self.max_channels = self.config.max_channels
        self.cycle_counter = 0
        self.tick = 0
        self.requests = 0
        self._next_channel = 1
        self._next_session = 1
        self._next_handle = 1
        self._codes = {name: code for code, name in self.catalog.statuses.items()}
        self.settings = {MAX_CHANNELS_KEY: self.config.max_channels, CYCLE_TIME_KEY: 10}

        lo, hi = self.config.crash_window_x64 if self.config.profile == "x64" else self.config.crash_window
        self.aslr_slide = 0
        if self.config.aslr_model:
            seed = None if self.config.aslr_seed is None else self.config.aslr_seed * 1_000_003 + boot_index
            self.aslr_slide = random.Random(seed).randrange(self.config.aslr_pages) * PAGE
        self.crash_window = (lo + self.aslr_slide, hi + self.aslr_slide)

        severity = {"mmove": self.config.mmove_severity, "oob": self.config.oob_severity}
        area3 = bytes((i * 37 + 11) & 0xFF for i in range(self.config.area3_size))
        self.apps: dict[str, SimApp] = {}
        for name in self.config.apps:
            if name not in BUILTIN_APPS:
                raise ValueError(f"unknown simulator app {name!r}")
            self.apps[name] = SimApp(BUILTIN_APPS[name], self.config.area0_size, area3, dict(severity))

        stored = self.store.load()
        self.node_name = stored.get("nodename", _text(self.config.node_name))
        self.shell_memory = self._shell_image()

        for comp in sorted(self.catalog.components.values(), key=lambda c: c.group):
            self.log(comp.group, INFO, f"component {comp.name} loaded", comp.name)
        if crash_note is not None:
            comp = self._component_group(crash_note.component)
            self.log(comp, EXCEPTION_SEVERITY, f"Exception: {crash_note.component}: {crash_note.detail}", crash_note.component)
        if self.node_broken:
            self.log(0x01, ERROR, "CmpDevice: node name invalid, discovery disabled", "CmpDevice")

        self._handlers: dict[str, Callable[[Request], tuple[int, list]]] = {
            "device.get_target_ident": self._get_target_ident,
            "device.login": self._device_login,
            "device.logout": self._device_logout,
            "device.echo": self._echo,
            "device.get_operating_mode": self._get_operating_mode,
            "device.set_node_name": self._set_node_name,
            "device.session_create": self._session_create,
            "app.login": self._app_login,
            "app.logout": self._app_logout,
            "app.start": self._app_start,
            "app.stop": self._app_stop,
            "app.reset": self._app_reset,
            "app.read_status": self._app_read_status,
            "app.read_app_list": self._read_app_list,
            "app.single_cycle": self._single_cycle,
            "app.read_app_state_list": self._read_app_state_list,
            "app.read_app_info": self._read_app_info,
            "app.read_project_info": self._read_project_info,
            "app.get_area_address": self._get_area_address,
            "monitor.read": self._monitor_read,
            "monitor.write": self._monitor_write,
            "plcshell.execute": self._plcshell_execute,
            "log.get_entries": self._log_entries,
            "log.logger_list": self._logger_list,
            "settings.get_int": self._settings_get,
            "settings.set_int": self._settings_set,
            "trace.packet_create": self._packet_create,
            "trace.packet_delete": self._packet_delete,
            "trace.record_add": self._record_add,
            "trace.packet_read_list": self._packet_read_list,
        }

    # ------------------------------------------------------------------ helpers

    def status(self, name: str) -> int:
        return self._codes[name]

    def log(self, component_id: int, severity: int, message: str, component: str = "") -> None:
        self.log_ring.append(LogEntry(self.tick, component_id, severity, message, component))

    def _component_group(self, name: str) -> int:
        for comp in self.catalog.components.values():
            if comp.name == name:
                return comp.group
        return 0

    def _shell_image(self) -> bytes:
        text = b"".join(_text(f"{c.name}\0") for c in self.catalog.components.values())
        out = bytearray()
        while len(out) < self.config.shell_window:
            out += text
        return bytes(out[: self.config.shell_window])

    @property
    def node_broken(self) -> bool:
        return node_name_poisoned(self.node_name)

    def reset_counters(self) -> None:
        """Fault-injection hook: forget the channel counters as an internal restart would."""
        for ch in self.channels.values():
            ch.ack_offset = ch.client_blk
            ch.server_blk = 0
            ch.cached_blk = None

    def corrupt_canary(self, value: int = 0xDEADBEEF) -> None:
        """Fault-injection hook: overwrite the interpreter stack canary."""
        self.canary = value

    # ------------------------------------------------------------------ channels

    def disconnect(self, conn_id: int) -> None:
        for cid in [c for c, ch in self.channels.items() if ch.conn_id == conn_id]:
            self._close_channel(cid)

    def _close_channel(self, cid: int) -> None:
        ch = self.channels.pop(cid, None)
        if ch is None:
            return
        if ch.device_session is not None:
            self.device_sessions.pop(ch.device_session, None)
            self.trace_packets.pop(ch.device_session, None)
        for sid in ch.app_sessions:
            self.app_sessions.pop(sid, None)

    def _expire(self) -> None:
        now = self.clock()
        for cid in [c for c, ch in self.channels.items() if now - ch.last_activity > self.config.channel_timeout]:
            self._close_channel(cid)

    def _reply_frame(self, req: wire.PacketFrame, command: int, channel_id: int, **kw) -> bytes:
        frame = wire.PacketFrame(
            datagram=wire.DatagramHeader(sender=req.datagram.receiver, receiver=req.datagram.sender),
            channel=wire.ChannelHeader(command, kw.get("flags", 0), channel_id, kw.get("blk_id", 0), kw.get("ack_id", 0)),
            service=kw.get("service"),
            block=wire.BlockFrame(magic=self.config.block_magic),
        )
        return wire.encode_frame(frame)

    def handle_frame(self, conn_id: int, data: bytes) -> list[bytes]:
        """Process one complete request frame and return the reply frames.

        Undecodable frames are dropped silently.  Raises :class:`RuntimeDeath`.
        """
        try:
            frame, region = wire.decode_outer(data, self.config.block_magic)
        except wire.FrameError:
            return []
        if frame.datagram.service_id != wire.SERVICE_CHANNEL:
            return []
        ch_hdr = frame.channel
        cmd = ch_hdr.command_id
        if cmd == wire.OPEN_REQUEST:
            return self._open_channel(conn_id, frame)
        ch = self.channels.get(ch_hdr.channel_id)
        if ch is not None and self.clock() - ch.last_activity > self.config.channel_timeout:
            self._close_channel(ch.channel_id)
            ch = None
        if ch is None or ch.conn_id != conn_id:
            return []
        ch.last_activity = self.clock()
        if cmd == wire.KEEPALIVE:
            return [self._reply_frame(frame, wire.KEEPALIVE, ch.channel_id, blk_id=ch.server_blk, ack_id=ch_hdr.ack_id)]
        if cmd != wire.BLK:
            return []
        if ch_hdr.blk_id == ch.cached_blk:
            return list(ch.cached_reply)
        if ch.ack_offset == 0 and ch_hdr.blk_id != ch.client_blk + 1:
            return []
        ch.client_blk = ch_hdr.blk_id
        ack_id = ch_hdr.blk_id - ch.ack_offset
        replies = [self._reply_frame(frame, wire.ACK, ch.channel_id, ack_id=ack_id)]
        if region:
            reply_service = self._service(ch, region)
            if reply_service is not None:
                ch.server_blk += 1
                replies.append(
                    self._reply_frame(
                        frame, wire.BLK, ch.channel_id, blk_id=ch.server_blk, ack_id=ack_id, service=reply_service
                    )
                )
        ch.cached_blk = ch_hdr.blk_id
        ch.cached_reply = replies
        return replies

    def _open_channel(self, conn_id: int, frame: wire.PacketFrame) -> list[bytes]:
        if self.node_broken:
            return []
        self._expire()
        if len(self.channels) >= self.max_channels:
            return [self._reply_frame(frame, wire.OPEN_CONFIRM, 0, flags=1, ack_id=self.status("OutOfLimits"))]
        cid = self._next_channel
        self._next_channel = self._next_channel % 0xFFFF + 1
        while cid in self.channels:
            cid = self._next_channel
            self._next_channel = self._next_channel % 0xFFFF + 1
        self.channels[cid] = Channel(cid, conn_id, self.clock())
        return [self._reply_frame(frame, wire.OPEN_CONFIRM, cid)]

    # ------------------------------------------------------------------ layer 7

    def _service(self, ch: Channel, region: bytes) -> wire.ServiceHeader | None:
        try:
            svc = wire.decode_service(region)
        except wire.FrameError:
            return wire.ServiceHeader(0, 0, 0, encode_tags([self._status_tag("NetPkgInvalid")]))
        if svc.protocol_id != wire.PROTOCOL_ID:
            return self._answer(svc, self.status("NetProtocolid"), [])
        self.requests += 1
        self.tick += 1
        try:
            result = self.route_service(ch, svc)
        finally:
            self._run_apps()
        return result

    def _status_tag(self, name: str) -> Tag:
        return leaf(STATUS_TAG, u16(self.status(name)))

    def _answer(self, svc: wire.ServiceHeader, code: int, tags: Sequence[Tag]) -> wire.ServiceHeader:
        payload = encode_tags([leaf(STATUS_TAG, u16(code)), *tags])
        return wire.ServiceHeader(svc.service_group, svc.command_id, svc.session_id, payload)

    def route_service(self, ch: Channel, svc: wire.ServiceHeader) -> wire.ServiceHeader | None:
        group, cmd = svc.service_group, svc.command_id
        spec = self.catalog.command(group, cmd)
        if spec is None:
            code = "L7UnknownCmdGrp" if group not in self.catalog.components else "L7UnknownCmd"
            return self._answer(svc, self.status(code), [])
        try:
            forest = decode_tags(svc.protocol_data)
        except TagError:
            return self._answer(svc, self.status("L7TagMissing"), [])

        app_session = None
        if spec.session != "none":
            if svc.session_id == 0 or self.device_sessions.get(svc.session_id) != ch.channel_id:
                return self._answer(svc, self.status("InvalidSessionId"), [])
            if spec.session in ("app", "app_rights"):
                app_session = self._app_session_from(forest, ch)
                if app_session is None:
                    code = "NoAccessRights" if spec.session == "app_rights" else "AppNoSessionId"
                    return self._answer(svc, self.status(code), [])
        for tag_id in spec.required_tags:
            if find(forest, tag_id) is None:
                return self._answer(svc, self.status("L7TagMissing"), [])

        req = Request(ch, svc, forest, spec, app_session)
        if spec.handler is None:
            return self._answer(svc, spec.decide(forest), [])
        try:
            code, tags = self._handlers[spec.handler](req)
        except _NoReply:
            return None
        return self._answer(svc, code, tags)

    def _app_session_from(self, forest: Sequence[Tag], ch: Channel) -> AppSession | None:
        tag = next((t for t in forest if t.tag_id == APP_SESSION_TAG), None)
        if tag is None or len(tag.data) != 8:
            return None
        sid, handle = struct.unpack("<II", tag.data)
        sess = self.app_sessions.get(sid)
        if sess is None or sess.handle != handle or sess.channel_id != ch.channel_id:
            return None
        return sess

    # ------------------------------------------------------------------ scan cycles

    def _run_apps(self) -> None:
        for app in self.apps.values():
            if app.state == RUNNING:
                self._cycle(app)

    def _cycle(self, app: SimApp) -> None:
        self.cycle_counter += 1
        try:
            app.scan_cycle()
        except AppFault as fault:
            app.state = EXCEPTION
            app.exception = fault.detail
            self.log(0x02, EXCEPTION_SEVERITY, f"Exception in {app.name}: {fault.kind}: {fault.detail}", "CmpApp")
            if fault.severity == "runtime":
                raise RuntimeDeath(app.name, f"{fault.kind}: {fault.detail}") from None

    # ------------------------------------------------------------------ CmpDevice

    def _get_target_ident(self, req: Request):
        if self.node_broken:
            raise _NoReply
        return self.status("Ok"), [
            leaf(0x10, self.node_name),
            leaf(0x11, _text("plcfuzz SoftPLC")),
            leaf(0x12, _text("plcfuzz project")),
            leaf(0x13, u16(0x1006)),
            leaf(0x14, u32(0x03050F00)),
            leaf(0x15, _text(self.config.profile)),
        ]

    def _new_session_id(self) -> int:
        sid = 0x10000000 | ((self.boot_index & 0xFF) << 16) | (self._next_session & 0xFFFF)
        self._next_session += 1
        return sid

    def _device_login(self, req: Request):
        ch = req.channel
        if ch.device_session is not None:
            self.device_sessions.pop(ch.device_session, None)
            self.trace_packets.pop(ch.device_session, None)
        for sid in ch.app_sessions:
            self.app_sessions.pop(sid, None)
        ch.app_sessions = set()
        sid = self._new_session_id()
        ch.device_session = sid
        self.device_sessions[sid] = ch.channel_id
        return self.status("Ok"), [leaf(0x20, u32(sid))]

    def _device_logout(self, req: Request):
        ch = req.channel
        self.device_sessions.pop(req.service.session_id, None)
        self.trace_packets.pop(req.service.session_id, None)
        for sid in ch.app_sessions:
            self.app_sessions.pop(sid, None)
        ch.app_sessions = set()
        ch.device_session = None
        return self.status("Ok"), []

    def _echo(self, req: Request):
        return self.status("Ok"), list(req.forest)

    def _get_operating_mode(self, req: Request):
        running = any(a.state == RUNNING for a in self.apps.values())
        return self.status("Ok"), [leaf(0x01, u32(1 if running else 2))]

    def _set_node_name(self, req: Request):
        name = find(req.forest, 0x58).data
        if not self.config.armed("nodename"):
            if any(b < 0x20 for b in name):
                return self.status("Parameter"), []
            if len(name) > NODE_NAME_LIMIT:
                return self.status("BufferSize"), []
        self.node_name = bytes(name)
        self.store.set("nodename", self.node_name)
        self.log(0x01, INFO, f"node renamed ({len(name)} bytes)", "CmpDevice")
        return self.status("Ok"), []

    def _session_create(self, req: Request):
        if self.node_broken:
            raise _NoReply
        return self.status("Ok"), [leaf(0x20, u32(self._new_session_id()))]

    # ------------------------------------------------------------------ CmpApp

    def _app_login(self, req: Request):
        name = _ascii(find(req.forest, 0x02).data)
        if name not in self.apps:
            return self.status("AppNotLoaded"), []
        sid = 0x20000000 | ((self.boot_index & 0xFF) << 16) | (self._next_session & 0xFFFF)
        self._next_session += 1
        handle = self._next_handle
        self._next_handle += 1
        self.app_sessions[sid] = AppSession(sid, handle, name, req.channel.channel_id)
        req.channel.app_sessions.add(sid)
        return self.status("Ok"), [leaf(APP_SESSION_TAG, struct.pack("<II", sid, handle))]

    def _app_logout(self, req: Request):
        sid = req.app_session.session_id
        self.app_sessions.pop(sid, None)
        req.channel.app_sessions.discard(sid)
        return self.status("Ok"), []

    def _app(self, req: Request) -> SimApp:
        return self.apps[req.app_session.app]

    def _app_start(self, req: Request):
        app = self._app(req)
        if app.state == EXCEPTION:
            return self.status("Exception"), []
        app.state = RUNNING
        return self.status("Ok"), [leaf(0x13, bytes([STATE_CODES[app.state]]))]

    def _app_stop(self, req: Request):
        app = self._app(req)
        if app.state == RUNNING:
            app.state = STOPPED
        return self.status("Ok"), [leaf(0x13, bytes([STATE_CODES[app.state]]))]

    def _app_reset(self, req: Request):
        app = self._app(req)
        app.reset()
        return self.status("Ok"), [leaf(0x13, bytes([STATE_CODES[app.state]]))]

    def _app_read_status(self, req: Request):
        app = self._app(req)
        tags = [leaf(0x13, bytes([STATE_CODES[app.state]])), leaf(0x14, struct.pack("<Q", app.cycles))]
        if app.exception:
            tags.append(leaf(0x15, _text(app.exception)))
        return self.status("Ok"), tags

    def _single_cycle(self, req: Request):
        app = self._app(req)
        if app.state == EXCEPTION:
            return self.status("Exception"), []
        self._cycle(app)
        return self.status("Ok"), [leaf(0x13, bytes([STATE_CODES[app.state]]))]

    def _read_app_list(self, req: Request):
        return self.status("Ok"), [node(0x81, leaf(0x02, _text(name))) for name in self.apps]

    def _read_app_state_list(self, req: Request):
        return self.status("Ok"), [
            node(0x81, leaf(0x02, _text(name)), leaf(0x13, bytes([STATE_CODES[a.state]])))
            for name, a in self.apps.items()
        ]

    def _read_app_info(self, req: Request):
        app = self._app(req)
        tags = [leaf(0x02, _text(app.name))]
        for var in app.model.inputs:
            tags.append(node(0x81, leaf(0x03, u32(var.offset)), leaf(0x04, u16(var.width)), leaf(0x05, _text(var.name))))
        return self.status("Ok"), tags

    def _read_project_info(self, req: Request):
        app = self._app(req)
        return self.status("Ok"), [leaf(0x02, _text(app.name)), leaf(0x06, _text(f"{app.name} project"))]

    def _get_area_address(self, req: Request):
        app = self._app(req)
        return self.status("Ok"), [
            node(0x81, leaf(0x30, u16(monitor.AREA_DATA)), leaf(0x31, u32(0x00400000)), leaf(0x32, u32(len(app.area0)))),
            node(0x81, leaf(0x30, u16(monitor.AREA_CODE)), leaf(0x31, u32(0x00800000)), leaf(0x32, u32(len(app.area3)))),
        ]

    # ------------------------------------------------------------------ CmpMonitor2

    def _areas(self, app: SimApp) -> dict:
        return {monitor.AREA_DATA: app.area0, monitor.AREA_CODE: bytearray(app.area3)}

    def _interpret(self, program: bytes, app: SimApp, values: Sequence[bytes] = ()) -> list[Tag]:
        try:
            return monitor.interpret(program, self._areas(app), values, canary=self.canary)
        except monitor.CanaryViolation as exc:
            self.log(0x1B, EXCEPTION_SEVERITY, f"Exception: CmpMonitor2: {exc}", "CmpMonitor2")
            raise RuntimeDeath("CmpMonitor2", str(exc)) from None

    def _monitor_read(self, req: Request):
        program = find(req.forest, PROGRAM_TAG).data
        if not program:
            return self.status("Parameter"), []
        return self.status("Ok"), self._interpret(program, self._app(req))

    def _monitor_write(self, req: Request):
        program = find(req.forest, PROGRAM_TAG).data
        if not program:
            return self.status("Parameter"), []
        values = []
        for tag in req.forest:
            if tag.tag_id != WRITE_REQUEST_TAG:
                continue
            try:
                size, _offset, value = parse_write_request(tag)
            except KeyError:
                return self.status("L7TagMissing"), []
            if size == 0 or size != len(value):
                return self.status("Parameter"), []
            values.append(value)
        return self.status("Ok"), self._interpret(program, self._app(req), values)

    # ------------------------------------------------------------------ CmpPlcShell

    def _plcshell_execute(self, req: Request):
        command = _ascii(find(req.forest, 0x10).data)
        arg = next((t for t in req.forest if t.tag_id == 0x12), None)
        if arg is not None:
            return self._shell_dump(arg)
        if command == "help":
            return self.status("Ok"), [leaf(0x20, b"help\nmem\napplist\ndump (tag 0x12 = offset)")]
        if command == "mem":
            lines = [f"{name}: area0 {len(a.area0)} bytes, area3 {len(a.area3)} bytes" for name, a in self.apps.items()]
            lines.append(f"shell window {len(self.shell_memory)} bytes")
            return self.status("Ok"), [leaf(0x20, _text("\n".join(lines)))]
        if command == "applist":
            return self.status("Ok"), [leaf(0x21, _text(name)) for name in self.apps]
        return self.status("NotSupported"), [leaf(0x20, _text(f"unknown command {command!r}"))]

    def _shell_dump(self, arg: Tag):
        if not 1 <= len(arg.data) <= 8:
            return self.status("Parameter"), []
        start = as_uint(arg.data)
        window = len(self.shell_memory)
        if not self.config.armed("plcshell") and start + 128 > window:
            return self.status("OutOfLimits"), []
        chunk = bytearray()
        for off in range(start, start + 128, 16):
            if off + 16 > window:
                self.log(0x11, EXCEPTION_SEVERITY, f"Exception: CmpPlcShell: SIGSEGV reading base+{off:#x}", "CmpPlcShell")
                raise RuntimeDeath("CmpPlcShell", f"SIGSEGV: read at shell base+{off:#x} beyond {window:#x}")
            chunk += self.shell_memory[off : off + 16]
        text = "\n".join(
            f"{start + i:08x}  {bytes(chunk[i : i + 16]).hex(' ')}" for i in range(0, len(chunk), 16)
        )
        return self.status("Ok"), [leaf(0x20, bytes(chunk)), leaf(0x22, _text(text))]

    # ------------------------------------------------------------------ CmpLog

    def _log_entries(self, req: Request):
        entries = [
            node(
                0x81,
                leaf(0x01, struct.pack("<Q", e.timestamp)),
                leaf(0x02, u16(e.component_id)),
                leaf(0x03, bytes([e.severity])),
                leaf(0x04, _text(e.message)),
                leaf(0x05, _text(e.component)),
            )
            for e in self.log_ring
        ]
        return self.status("Ok"), entries

    def _logger_list(self, req: Request):
        return self.status("Ok"), [leaf(0x10, b"Std")]

    # ------------------------------------------------------------------ CmpSettings

    def _settings_get(self, req: Request):
        key = _ascii(find(req.forest, 0x10).data)
        if key not in self.settings:
            return self.status("NoObject"), []
        return self.status("Ok"), [leaf(0x11, u32(self.settings[key]))]

    def _settings_set(self, req: Request):
        key = _ascii(find(req.forest, 0x10).data)
        data = find(req.forest, 0x11).data
        if key not in self.settings:
            return self.status("NoObject"), []
        if not 1 <= len(data) <= 4:
            return self.status("Parameter"), []
        value = as_uint(data)
        if key == MAX_CHANNELS_KEY:
            if not 1 <= value <= 64:
                return self.status("OutOfLimits"), []
            self.max_channels = value
        self.settings[key] = value
        return self.status("Ok"), [leaf(0x11, u32(value))]

    # ------------------------------------------------------------------ CmpTraceMgr

    def _packets(self, req: Request) -> dict[int, list]:
        return self.trace_packets.setdefault(req.service.session_id, {})

    def _packet_create(self, req: Request):
        handle = self._next_handle
        self._next_handle += 1
        self._packets(req)[handle] = []
        return self.status("Ok"), [leaf(0x20, u32(handle))]

    def _packet_delete(self, req: Request):
        handle = as_uint(find(req.forest, 0x20).data)
        if self._packets(req).pop(handle, None) is None:
            return self.status("InvalidHandle"), []
        return self.status("Ok"), []

    def _packet_read_list(self, req: Request):
        return self.status("Ok"), [leaf(0x20, u32(h)) for h in sorted(self._packets(req))]

    def _record_add(self, req: Request):
        record = find(req.forest, 0x81)
        value_tag = find(record.children, 0x40)
        if value_tag is None:
            return self.status("L7TagMissing"), []
        widths = (4, 8) if self.config.profile == "x64" else (4,)
        if len(value_tag.data) not in widths:
            return self.status("Parameter"), []
        value = as_uint(value_tag.data)
        ceiling = (1 << (8 * len(value_tag.data))) - 0x10
        if value == 0 or value >= ceiling:
            return self.status("Parameter"), []
        kind = find(record.children, 0x22)
        if kind is not None and as_uint(kind.data) > 0x20:
            return self.status("TypeMismatch"), []
        packets = self._packets(req)
        if packets:
            next(iter(packets.values())).append(value)
            return self.status("Ok"), []
        lo, hi = self.crash_window
        if self.config.armed("trace") and lo <= value < hi:
            offset = value - self.aslr_slide
            self.log(0x0F, EXCEPTION_SEVERITY, f"Exception: CmpTraceMgr: SIGSEGV write at {offset:#x}", "CmpTraceMgr")
            raise RuntimeDeath("CmpTraceMgr", f"SIGSEGV: recordAdd dereferenced {value:#x} (empty packet)")
        return self.status("NoMemory"), []

    # ------------------------------------------------------------------ registry

    def registry(self) -> list[tuple[int, int]]:
        return self.catalog.registry()


def seed_record_add_payload(value: int = 0x00003000, width: int = 4) -> list[Tag]:
    """The valid recordAdd payload used as the campaign seed: 17 tags, depth 3."""
    return [
        node(
            0x81,
            leaf(0x20, u32(0)),
            leaf(0x21, _text("Trace")),
            leaf(0x22, u16(0x0005)),
            leaf(0x23, u32(10)),
            node(
                0x82,
                leaf(0x24, _text("Application.GVL_Trace.stMotorControl.rActualVelocity")),
                leaf(0x25, u16(0x0004)),
                leaf(0x26, u32(0x00000001)),
            ),
            node(
                0x83,
                leaf(0x40, value.to_bytes(width, "little")),
                leaf(0x42, u16(monitor.AREA_DATA)),
                leaf(0x43, u16(4)),
                leaf(0x44, u32(0)),
            ),
            node(
                0x84,
                leaf(0x27, _text("trigger")),
                leaf(0x28, u32(0)),
            ),
        )
    ]
