"""Stateful client for the runtime protocol: channels, sessions, commands, memory access.

A :class:`DriverSession` owns one TCP connection and one channel.  It is not
thread-safe; keepalives are driven by the owner through :meth:`DriverSession.idle`
or :meth:`DriverSession.maybe_keepalive` instead of a background thread.
"""

from __future__ import annotations

import shlex
import socket
import struct
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

from . import monitor, wire
from .catalog import Catalog, default_catalog
from .tags import (
    APP_SESSION_TAG,
    INTERP_FAULT_TAG,
    PROGRAM_TAG,
    READ_OK_TAG,
    STATUS_TAG,
    Tag,
    as_uint,
    build_write_request,
    decode_tags,
    encode_tags,
    find,
    leaf,
    walk,
)

STATUS_OK = 0x00
STATUS_INVALID_SESSION = 0x1C
STATUS_APP_NOT_LOADED = 0x504
STATUS_APP_NO_SESSION = 0x505
MEMDUMP_CHUNK = 128

APP_STATES = {0: "stopped", 1: "running", 2: "exception"}


class DriverError(Exception):
    pass


class ConnectRefused(DriverError):
    pass


class OpenTimeout(DriverError):
    pass


class ChannelExhausted(DriverError):
    def __init__(self, status: int):
        super().__init__(f"channel open rejected, status {status:#x}")
        self.status = status


class ReplyTimeout(DriverError):
    pass


class ChannelBroken(DriverError):
    pass


class CounterInconsistent(ChannelBroken):
    pass


class ConnectionLost(ChannelBroken):
    pass


class StatusError(DriverError):
    def __init__(self, status: int, reply: "ServiceReply | None" = None, message: str = ""):
        super().__init__(message or f"status {status:#x}")
        self.status = status
        self.reply = reply


class LoginRejected(StatusError):
    pass


class AppNotLoaded(StatusError):
    pass


class AppNoSessionId(StatusError):
    pass


class InterpreterFault(DriverError):
    def __init__(self, code: int, partial: bytes = b""):
        super().__init__(f"interpreter fault {code:#04x}")
        self.code = code
        self.partial = partial


def status_sequence(forest: Sequence[Tag]) -> list[tuple[str, int]]:
    """Collect the (layer, code) pairs carried by a reply payload, in order."""
    out = []
    for _, tag in walk(forest):
        if tag.tag_id == STATUS_TAG and len(tag.data) >= 2:
            out.append(("service", as_uint(tag.data[:2])))
        elif tag.tag_id == INTERP_FAULT_TAG and tag.data:
            out.append(("monitor", tag.data[0]))
    return out


@dataclass
class ServiceReply:
    service_group: int
    command_id: int
    session_id: int
    tags: list
    status_sequence: list
    payload: bytes = b""

    @property
    def status(self) -> int | None:
        for layer, code in self.status_sequence:
            if layer == "service":
                return code
        return None

    def find(self, tag_id: int) -> Tag | None:
        return find(self.tags, tag_id)

    @classmethod
    def from_service(cls, svc: wire.ServiceHeader) -> "ServiceReply":
        try:
            tags = decode_tags(svc.protocol_data)
        except ValueError:
            tags = []
        seq = status_sequence(tags) or [("service", -1)]
        return cls(svc.service_group, svc.command_id, svc.session_id, tags, seq, svc.protocol_data)


@dataclass
class DriverConfig:
    host: str = "127.0.0.1"
    port: int = 11740
    connect_timeout: float = 2.0
    open_timeout: float = 2.0
    reply_timeout: float = 2.0
    retransmits: int = 1
    keepalive_interval: float = 1.0
    block_magic: int = wire.DEFAULT_BLOCK_MAGIC
    sender: tuple = (0x0001,)
    receiver: tuple = (0x0002,)


@dataclass
class AppStatus:
    state: str
    cycles: int = 0
    exception: str = ""


@dataclass
class LogRecord:
    timestamp: int
    component_id: int
    severity: int
    message: str
    component: str = ""


Recorder = Callable[[str, bytes], None]


@dataclass
class DriverSession:
    config: DriverConfig = field(default_factory=DriverConfig)
    catalog: Catalog = field(default_factory=default_catalog)
    recorder: Recorder | None = None
    transport: socket.socket | None = None
    channel_id: int = 0
    blk_counter: int = 0
    ack_counter: int = 0
    device_session_id: int | None = None
    app_session_id: int | None = None
    app_handle: int | None = None
    app_name: str | None = None
    last_activity: float = 0.0
    latencies: list = field(default_factory=list)
    _buffer: bytes = b""
    _stale: set = field(default_factory=set)

    @property
    def keepalive_interval(self) -> float:
        return self.config.keepalive_interval

    # ------------------------------------------------------------ transport

    @classmethod
    def connect(cls, host: str | None = None, port: int | None = None, config: DriverConfig | None = None, **kw) -> "DriverSession":
        """Connect and open a channel (``open_channel`` in one step)."""
        config = config or DriverConfig()
        if host is not None:
            config.host = host
        if port is not None:
            config.port = port
        session = cls(config=config, **kw)
        session.open_channel()
        return session

    def _connect(self) -> None:
        try:
            sock = socket.create_connection((self.config.host, self.config.port), timeout=self.config.connect_timeout)
        except OSError as exc:
            raise ConnectRefused(f"{self.config.host}:{self.config.port}: {exc}") from None
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.transport = sock
        self._buffer = b""

    def close(self) -> None:
        if self.transport is not None:
            try:
                self.transport.close()
            finally:
                self.transport = None

    def __enter__(self) -> "DriverSession":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    @property
    def alive(self) -> bool:
        return self.transport is not None

    def _send(self, frame: wire.PacketFrame) -> None:
        data = wire.encode_frame(frame)
        if self.transport is None:
            raise ConnectionLost("not connected")
        try:
            self.transport.sendall(data)
        except OSError as exc:
            self.close()
            raise ConnectionLost(str(exc)) from None
        if self.recorder:
            self.recorder("client", data)
        self.last_activity = time.monotonic()

    def _recv_frame(self, deadline: float) -> wire.PacketFrame | None:
        """Next decodable frame before ``deadline``; ``None`` on timeout."""
        while True:
            frames, rest = wire.split_frames(self._buffer, self.config.block_magic)
            if frames:
                first = frames[0]
                self._buffer = self._buffer[len(first) :]
                if self.recorder:
                    self.recorder("server", first)
                try:
                    return wire.decode_frame(first, self.config.block_magic)
                except wire.FrameError:
                    continue
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                return None
            if self.transport is None:
                raise ConnectionLost("not connected")
            self.transport.settimeout(remaining)
            try:
                chunk = self.transport.recv(65536)
            except socket.timeout:
                return None
            except OSError as exc:
                self.close()
                raise ConnectionLost(str(exc)) from None
            if not chunk:
                self.close()
                raise ConnectionLost("peer closed the connection")
            self._buffer += chunk

    def _frame(self, command: int, **kw) -> wire.PacketFrame:
        return wire.PacketFrame(
            datagram=wire.DatagramHeader(sender=self.config.sender, receiver=self.config.receiver),
            channel=wire.ChannelHeader(command, kw.get("flags", 0), self.channel_id, kw.get("blk_id", 0), kw.get("ack_id", 0)),
            service=kw.get("service"),
            block=wire.BlockFrame(magic=self.config.block_magic),
        )

    # ------------------------------------------------------------ channel

    def open_channel(self) -> int:
        if self.transport is None:
            self._connect()
        self.channel_id = 0
        self._send(self._frame(wire.OPEN_REQUEST))
        deadline = time.monotonic() + self.config.open_timeout
        while True:
            frame = self._recv_frame(deadline)
            if frame is None:
                raise OpenTimeout(f"no channel confirmation within {self.config.open_timeout}s")
            if frame.channel.command_id != wire.OPEN_CONFIRM:
                continue
            if frame.channel.flags & 1:
                raise ChannelExhausted(frame.channel.ack_id & 0xFFFF)
            self.channel_id = frame.channel.channel_id
            self.blk_counter = 0
            self.ack_counter = 0
            self.device_session_id = None
            self.app_session_id = None
            self.app_handle = None
            self._stale = set()
            return self.channel_id

    def keepalive_tick(self, timeout: float | None = None) -> bool:
        """Send one keepalive; ``True`` if the peer answered in time."""
        if timeout is None:
            timeout = min(self.config.reply_timeout, max(self.config.keepalive_interval, 0.05))
        start = time.monotonic()
        try:
            self._send(self._frame(wire.KEEPALIVE, ack_id=self.ack_counter))
            deadline = start + timeout
            while True:
                frame = self._recv_frame(deadline)
                if frame is None:
                    return False
                if frame.channel.command_id == wire.KEEPALIVE:
                    self.latencies.append(time.monotonic() - start)
                    return True
        except ChannelBroken:
            return False

    def maybe_keepalive(self) -> bool | None:
        if time.monotonic() - self.last_activity >= self.config.keepalive_interval:
            return self.keepalive_tick()
        return None

    def idle(self, seconds: float) -> bool:
        """Sleep for ``seconds`` while keeping the channel alive.  ``False`` if a keepalive failed."""
        end = time.monotonic() + seconds
        ok = True
        while True:
            now = time.monotonic()
            if now >= end:
                return ok
            wait = min(end - now, max(0.0, self.last_activity + self.config.keepalive_interval - now))
            time.sleep(wait)
            if time.monotonic() - self.last_activity >= self.config.keepalive_interval:
                ok = self.keepalive_tick() and ok

    # ------------------------------------------------------------ commands

    def _bind_payload(self, spec_session: str | None, payload: Sequence[Tag]) -> list[Tag]:
        forest = list(payload)
        if spec_session in ("app", "app_rights") and self.app_session_id is not None:
            forest = [t for t in forest if t.tag_id != APP_SESSION_TAG]
            forest.insert(0, leaf(APP_SESSION_TAG, struct.pack("<II", self.app_session_id, self.app_handle or 0)))
        return forest

    def send_command(
        self,
        service_group: int,
        command_id: int,
        payload: Sequence[Tag] | bytes = (),
        *,
        session_id: int | None = None,
        bind: bool = True,
    ) -> ServiceReply:
        """Deliver one Layer-7 request and wait for its reply.

        ``payload`` is a tag forest or pre-encoded bytes.  With ``bind`` the
        application session tag is added for commands that need it.
        """
        if isinstance(payload, (bytes, bytearray)):
            data = bytes(payload)
        else:
            spec = self.catalog.command(service_group, command_id)
            forest = self._bind_payload(spec.session if spec and bind else None, payload)
            data = encode_tags(forest)
        if session_id is None:
            session_id = self.device_session_id or 0
        service = wire.ServiceHeader(service_group, command_id, session_id, data)
        return self.send_service(service)

    def send_service(self, service: wire.ServiceHeader) -> ServiceReply:
        self.blk_counter = (self.blk_counter + 1) & 0xFFFFFFFF
        blk = self.blk_counter
        frame = self._frame(wire.BLK, blk_id=blk, ack_id=self.ack_counter, service=service)
        for attempt in range(self.config.retransmits + 1):
            if attempt:
                self._stale.add(blk)
            self._send(frame)
            reply = self._await_reply(blk, time.monotonic() + self.config.reply_timeout)
            if reply is not None:
                return reply
        raise ReplyTimeout(f"no reply to BLK {blk} ({service.service_group:#x}, {service.command_id:#x})")

    def _await_reply(self, blk: int, deadline: float) -> ServiceReply | None:
        while True:
            frame = self._recv_frame(deadline)
            if frame is None:
                return None
            ch = frame.channel
            if ch.command_id == wire.ACK:
                if ch.ack_id != blk and ch.ack_id not in self._stale:
                    raise CounterInconsistent(f"ACK for {ch.ack_id}, expected {blk}")
                continue
            if ch.command_id != wire.BLK:
                continue
            if ch.ack_id != blk:
                if ch.ack_id in self._stale:
                    continue
                raise CounterInconsistent(f"reply acknowledges BLK {ch.ack_id}, expected {blk}")
            if ch.blk_id != self.ack_counter + 1:
                if blk in self._stale and ch.blk_id == self.ack_counter:
                    continue
                raise CounterInconsistent(f"server BLK {ch.blk_id} after {self.ack_counter}")
            self.ack_counter = ch.blk_id
            self._send(self._frame(wire.ACK, ack_id=ch.blk_id))
            if frame.service is None:
                raise ChannelBroken("BLK reply without service layer")
            return ServiceReply.from_service(frame.service)

    def _checked(self, reply: ServiceReply, error=StatusError) -> ServiceReply:
        status = reply.status
        if status == STATUS_OK:
            return reply
        if status == STATUS_APP_NOT_LOADED:
            raise AppNotLoaded(status, reply)
        if status == STATUS_APP_NO_SESSION:
            raise AppNoSessionId(status, reply)
        name = self.catalog.status_name(status) if status is not None else None
        raise error(status, reply, f"status {name or 'unknown'} ({status:#x})")

    def command(self, component: str, name: str, payload: Sequence[Tag] = ()) -> ServiceReply:
        spec = self.catalog.lookup(component, name)
        return self._checked(self.send_command(spec.group, spec.command_id, payload))

    # ------------------------------------------------------------ typed helpers (bold commands)

    def get_target_ident(self) -> dict:
        reply = self._checked(self.send_command(0x01, 0x01, session_id=0))
        out = {}
        for tag_id, key in ((0x10, "node_name"), (0x11, "device_name"), (0x12, "vendor"), (0x15, "profile")):
            tag = reply.find(tag_id)
            if tag is not None:
                out[key] = tag.data.decode("utf-8", errors="replace")
        for tag_id, key in ((0x13, "device_type"), (0x14, "version")):
            tag = reply.find(tag_id)
            if tag is not None:
                out[key] = as_uint(tag.data)
        return out

    def device_login(self) -> int:
        reply = self.send_command(0x01, 0x02, session_id=0)
        self._checked(reply, LoginRejected)
        tag = reply.find(0x20)
        if tag is None or len(tag.data) != 4:
            raise LoginRejected(-1, reply, "login reply lacks a session id")
        self.device_session_id = as_uint(tag.data)
        self.app_session_id = None
        self.app_handle = None
        return self.device_session_id

    def device_logout(self) -> None:
        self._checked(self.send_command(0x01, 0x03))
        self.device_session_id = None
        self.app_session_id = None
        self.app_handle = None

    def session_create(self) -> int:
        reply = self._checked(self.send_command(0x01, 0x0A, session_id=0))
        return as_uint(reply.find(0x20).data)

    def read_app_list(self) -> list[str]:
        reply = self._checked(self.send_command(0x02, 0x18))
        return [t.data.decode("utf-8", errors="replace") for _, t in walk(reply.tags) if t.tag_id == 0x02]

    def app_login(self, app_name: str) -> tuple[int, int]:
        reply = self._checked(self.send_command(0x02, 0x01, [leaf(0x02, app_name.encode("utf-8"))]))
        tag = reply.find(APP_SESSION_TAG)
        if tag is None or len(tag.data) != 8:
            raise AppNoSessionId(STATUS_APP_NO_SESSION, reply, "app login reply lacks a session tag")
        self.app_session_id, self.app_handle = struct.unpack("<II", tag.data)
        self.app_name = app_name
        return self.app_session_id, self.app_handle

    def app_logout(self) -> None:
        self._checked(self.send_command(0x02, 0x02))
        self.app_session_id = None
        self.app_handle = None

    def read_app_info(self) -> list[tuple[str, int, int]]:
        """Input variables of the logged-in app as ``(name, offset, width)``."""
        reply = self._checked(self.send_command(0x02, 0x29))
        out = []
        for tag in reply.tags:
            if tag.tag_id == 0x81:
                off, width, name = (tag.find(i) for i in (0x03, 0x04, 0x05))
                out.append((name.data.decode(), as_uint(off.data), as_uint(width.data)))
        return out

    def get_area_address(self) -> dict[int, tuple[int, int]]:
        reply = self._checked(self.send_command(0x02, 0x38))
        out = {}
        for tag in reply.tags:
            if tag.tag_id == 0x81:
                area, addr, size = (as_uint(tag.find(i).data) for i in (0x30, 0x31, 0x32))
                out[area] = (addr, size)
        return out

    _APP_ACTIONS = {
        "start": 0x10,
        "stop": 0x11,
        "reset": 0x12,
        "single_cycle": 0x22,
        "cycle": 0x22,
        "read_status": 0x14,
        "status": 0x14,
    }

    def read_status(self) -> AppStatus:
        reply = self._checked(self.send_command(0x02, 0x14))
        state = APP_STATES.get(as_uint(reply.find(0x13).data), "unknown")
        cycles_tag = reply.find(0x14)
        exc = reply.find(0x15)
        return AppStatus(
            state,
            as_uint(cycles_tag.data) if cycles_tag else 0,
            exc.data.decode("utf-8", errors="replace") if exc else "",
        )

    def app_control(self, action: str) -> str:
        """Run one execution-control action and return the resulting app state."""
        if action not in self._APP_ACTIONS:
            raise ValueError(f"unknown app action {action!r}")
        if action in ("read_status", "status"):
            return self.read_status().state
        reply = self._checked(self.send_command(0x02, self._APP_ACTIONS[action]))
        tag = reply.find(0x13)
        return APP_STATES.get(as_uint(tag.data), "unknown") if tag else "unknown"

    def mem_read(self, offset: int, length: int, area: int = monitor.AREA_DATA) -> bytes:
        program = monitor.read_program(offset, length, area)
        reply = self._checked(self.send_command(0x1B, 0x01, [leaf(PROGRAM_TAG, program)]))
        fault = reply.find(INTERP_FAULT_TAG)
        if fault is not None:
            raise InterpreterFault(fault.data[0] if fault.data else 0)
        data = reply.find(READ_OK_TAG)
        if data is None:
            raise ChannelBroken("read reply carries neither 0x40 nor 0x41")
        return data.data

    def mem_write(self, offset: int, value: bytes, area: int = monitor.AREA_DATA) -> None:
        program = monitor.write_program(offset, len(value), area)
        payload = [leaf(PROGRAM_TAG, program), build_write_request(offset, bytes(value))]
        reply = self._checked(self.send_command(0x1B, 0x02, payload))
        fault = reply.find(INTERP_FAULT_TAG)
        if fault is not None:
            raise InterpreterFault(fault.data[0] if fault.data else 0)

    def mem_write_many(self, writes: Sequence[tuple[int, bytes]], area: int = monitor.AREA_DATA) -> None:
        """Store several ``(offset, value)`` pairs with a single Write request."""
        program = monitor.write_many_program([(off, len(val)) for off, val in writes], area)
        payload = [leaf(PROGRAM_TAG, program)] + [build_write_request(off, bytes(val)) for off, val in writes]
        reply = self._checked(self.send_command(0x1B, 0x02, payload))
        fault = reply.find(INTERP_FAULT_TAG)
        if fault is not None:
            raise InterpreterFault(fault.data[0] if fault.data else 0)

    def memdump(self, start: int, length: int, area: int = monitor.AREA_DATA) -> bytes:
        out = bytearray()
        pos = start
        end = start + length
        while pos < end:
            n = min(MEMDUMP_CHUNK, end - pos)
            try:
                out += self.mem_read(pos, n, area)
            except InterpreterFault as fault:
                raise InterpreterFault(fault.code, bytes(out)) from None
            pos += n
        return bytes(out)

    def fetch_logs(self) -> list[LogRecord]:
        loggers = self.send_command(0x05, 0x03)
        name = loggers.find(0x10)
        payload = [leaf(0x10, name.data)] if name is not None else []
        reply = self._checked(self.send_command(0x05, 0x01, payload))
        out = []
        for tag in reply.tags:
            if tag.tag_id != 0x81:
                continue
            parts = {c.tag_id: c.data for c in tag.children}
            out.append(
                LogRecord(
                    timestamp=as_uint(parts.get(0x01, b"")),
                    component_id=as_uint(parts.get(0x02, b"")),
                    severity=as_uint(parts.get(0x03, b"")),
                    message=parts.get(0x04, b"").decode("utf-8", errors="replace"),
                    component=parts.get(0x05, b"").decode("utf-8", errors="replace"),
                )
            )
        return out

    def plcshell(self, command: str, arg: int | None = None) -> ServiceReply:
        payload = [leaf(0x10, command.encode("utf-8"))]
        if arg is not None:
            payload.append(leaf(0x12, struct.pack("<I", arg)))
        return self.send_command(0x11, 0x01, payload)

    def set_setting(self, key: str, value: int) -> ServiceReply:
        return self._checked(self.send_command(0x06, 0x02, [leaf(0x10, key.encode()), leaf(0x11, struct.pack("<I", value))]))

    def get_setting(self, key: str) -> int:
        reply = self._checked(self.send_command(0x06, 0x01, [leaf(0x10, key.encode())]))
        return as_uint(reply.find(0x11).data)


def login_sequence(config: DriverConfig, app: str | None = None, **kw) -> DriverSession:
    """Open a channel, log in to the device and optionally to ``app``."""
    session = DriverSession.connect(config=config, **kw)
    try:
        session.device_login()
        if app:
            session.app_login(app)
    except Exception:
        session.close()
        raise
    return session


def probe_dead(session: DriverSession, misses: int = 3) -> bool:
    """True when ``misses`` consecutive keepalives go unanswered."""
    for _ in range(misses):
        if session.keepalive_tick():
            return False
    return True


def generate_exploit_template(finding) -> str:
    """Standalone shell reproducer for a crash finding.

    ``finding`` needs ``routing`` (group, command), ``input`` (payload bytes),
    ``kind`` and optionally ``app`` and ``dedup_key``.  The output depends on
    nothing else, so equal findings give byte-identical scripts.
    """
    group, cmd = finding.routing
    payload = bytes(finding.input).hex()
    app = getattr(finding, "app", None)
    key = getattr(finding, "dedup_key", "") or ""
    detail = getattr(finding, "fault", "") or ""
    args = [
        "send-raw",
        "--host",
        '"$HOST"',
        "--port",
        '"$PORT"',
        "--group",
        f"{group:#06x}",
        "--cmd",
        f"{cmd:#06x}",
    ]
    if app:
        args += ["--app", shlex.quote(app)]
    args += ["--expect-crash", "--hex", payload]
    lines = [
        "#!/bin/sh",
        f"# Reproducer: {finding.kind} via service ({group:#06x}, {cmd:#06x})",
    ]
    if key:
        lines.append(f"# dedup key: {key}")
    if detail:
        lines.append(f"# fault: {detail}")
    lines += [
        "# Usage: sh reproduce.sh [HOST] [PORT]; exit status 0 means the crash reproduced.",
        "set -u",
        'HOST="${1:-127.0.0.1}"',
        'PORT="${2:-11740}"',
        "exec ${PYTHON:-python3} -m plcfuzz " + " ".join(args),
        "",
    ]
    return "\n".join(lines)
