"""TCP front end and restart wrapper for the simulated runtime.

The server runs a single-threaded ``selectors`` loop.  When the runtime dies
every client connection is closed and a new boot is started on the same
listening socket, which is what an init-script restart of a real device looks
like from the network.
"""

from __future__ import annotations

import logging
import queue
import selectors
import socket
import threading
import time
from typing import Callable

from .. import wire
from ..catalog import Catalog, default_catalog
from .runtime import NodeStore, Runtime, RuntimeDeath, SimConfig

log = logging.getLogger(__name__)

MAX_FRAME = 1 << 20


class StreamConnection:
    """Reassembles frames from one TCP stream and feeds them to the runtime."""

    def __init__(self, server_runtime: Callable[[], Runtime], conn_id: int, block_magic: int):
        self._runtime = server_runtime
        self.conn_id = conn_id
        self.block_magic = block_magic
        self.buffer = b""
        self.frames_in = 0

    def feed(self, data: bytes) -> tuple[bytes, bool]:
        """Return ``(reply bytes, close)``.  May raise :class:`RuntimeDeath`."""
        self.buffer += data
        try:
            frames, self.buffer = wire.split_frames(self.buffer, self.block_magic, MAX_FRAME)
        except wire.FrameError:
            # stream is out of sync; a real runtime drops the connection
            return b"", True
        out = []
        runtime = self._runtime()
        for frame in frames:
            self.frames_in += 1
            out.extend(runtime.handle_frame(self.conn_id, frame))
        return b"".join(out), False


class _Client:
    def __init__(self, sock: socket.socket, stream: StreamConnection):
        self.sock = sock
        self.stream = stream
        self.outbuf = bytearray()


class SimServer:
    """Simulator process model: persistent listener plus boot-on-death wrapper."""

    def __init__(self, config: SimConfig | None = None, catalog: Catalog | None = None):
        self.config = config or SimConfig()
        self.catalog = catalog or default_catalog()
        self.store = NodeStore(self.config.node_config)
        self.boots = 0
        self.deaths: list[RuntimeDeath] = []
        self._past_cycles = 0
        self.runtime = self._boot(None)
        self._listener: socket.socket | None = None
        self._sel: selectors.DefaultSelector | None = None
        self._clients: dict[int, _Client] = {}
        self._next_conn = 1
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._calls: queue.Queue = queue.Queue()
        self._wake_r, self._wake_w = socket.socketpair()
        self.serving = False
        self.loop_exits = 0

    # -------------------------------------------------------------- lifecycle

    def _boot(self, note: RuntimeDeath | None) -> Runtime:
        runtime = Runtime(self.config, self.catalog, boot_index=self.boots, store=self.store, crash_note=note)
        self.boots += 1
        return runtime

    @property
    def port(self) -> int:
        return self._listener.getsockname()[1] if self._listener else self.config.port

    @property
    def address(self) -> tuple[str, int]:
        return (self.config.host, self.port)

    @property
    def total_cycles(self) -> int:
        """Scan cycles executed across every boot of this server."""
        return self._past_cycles + self.runtime.cycle_counter

    def bind(self) -> "SimServer":
        if self._listener is None:
            sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            sock.bind((self.config.host, self.config.port))
            sock.listen(64)
            sock.setblocking(False)
            self._listener = sock
        return self

    def start(self) -> "SimServer":
        """Bind and serve from a daemon thread; returns once listening."""
        self.bind()
        self._stop.clear()
        self._thread = threading.Thread(target=self.serve_forever, name=f"sim:{self.port}", daemon=True)
        self._thread.start()
        return self

    def stop(self, timeout: float = 5.0) -> None:
        self._stop.set()
        self._wake()
        if self._thread is not None and self._thread is not threading.current_thread():
            self._thread.join(timeout)
        self._thread = None
        self._close_all()
        if self._listener is not None:
            self._listener.close()
            self._listener = None

    def __enter__(self) -> "SimServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

    def _wake(self) -> None:
        try:
            self._wake_w.send(b"\0")
        except OSError:
            pass

    def call(self, fn: Callable[[Runtime], object], timeout: float = 5.0):
        """Run ``fn(runtime)`` on the loop thread and return its result."""
        if self._thread is None:
            return fn(self.runtime)
        done: queue.Queue = queue.Queue()
        self._calls.put((fn, done))
        self._wake()
        ok, value = done.get(timeout=timeout)
        if not ok:
            raise value
        return value

    def reboot(self) -> None:
        """Restart the runtime without a crash, like a power cycle."""

        def _do(_rt):
            self._restart(None)

        self.call(_do)

    # -------------------------------------------------------------- loop

    def serve_forever(self) -> None:
        self.bind()
        sel = selectors.DefaultSelector()
        self._sel = sel
        sel.register(self._listener, selectors.EVENT_READ, "listen")
        sel.register(self._wake_r, selectors.EVENT_READ, "wake")
        self.serving = True
        try:
            while not self._stop.is_set():
                for key, mask in sel.select(0.5):
                    if key.data == "listen":
                        self._accept()
                    elif key.data == "wake":
                        self._drain_wake()
                    else:
                        client = self._clients.get(key.data)
                        if client is None:
                            continue
                        if mask & selectors.EVENT_READ:
                            self._read(client)
                        if mask & selectors.EVENT_WRITE and key.data in self._clients:
                            self._flush(client)
                    if self._stop.is_set():
                        break
        finally:
            self.serving = False
            self.loop_exits += 1
            self._close_all()
            sel.close()
            self._sel = None

    def _drain_wake(self) -> None:
        try:
            self._wake_r.recv(4096)
        except OSError:
            pass
        while True:
            try:
                fn, done = self._calls.get_nowait()
            except queue.Empty:
                return
            try:
                done.put((True, fn(self.runtime)))
            except RuntimeDeath as death:
                done.put((True, None))
                self._die(death)
            except Exception as exc:  # handed back to the caller
                done.put((False, exc))

    def _accept(self) -> None:
        try:
            sock, _ = self._listener.accept()
        except OSError:
            return
        sock.setblocking(False)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        conn_id = self._next_conn
        self._next_conn += 1
        self._clients[conn_id] = _Client(sock, StreamConnection(lambda: self.runtime, conn_id, self.config.block_magic))
        self._sel.register(sock, selectors.EVENT_READ, conn_id)

    def _read(self, client: _Client) -> None:
        try:
            data = client.sock.recv(65536)
        except (BlockingIOError, InterruptedError):
            return
        except OSError:
            data = b""
        if not data:
            self._drop(client.stream.conn_id)
            return
        try:
            out, close = client.stream.feed(data)
        except RuntimeDeath as death:
            self._die(death)
            return
        if out:
            client.outbuf += out
            self._flush(client)
        if close:
            self._drop(client.stream.conn_id)

    def _flush(self, client: _Client) -> None:
        conn_id = client.stream.conn_id
        try:
            while client.outbuf:
                n = client.sock.send(client.outbuf)
                del client.outbuf[:n]
        except (BlockingIOError, InterruptedError):
            pass
        except OSError:
            self._drop(conn_id)
            return
        if self._sel is not None and conn_id in self._clients:
            events = selectors.EVENT_READ | (selectors.EVENT_WRITE if client.outbuf else 0)
            self._sel.modify(client.sock, events, conn_id)

    def _drop(self, conn_id: int) -> None:
        client = self._clients.pop(conn_id, None)
        if client is None:
            return
        self.runtime.disconnect(conn_id)
        if self._sel is not None:
            try:
                self._sel.unregister(client.sock)
            except (KeyError, ValueError):
                pass
        client.sock.close()

    def _close_all(self) -> None:
        for conn_id in list(self._clients):
            self._drop(conn_id)

    def _die(self, death: RuntimeDeath) -> None:
        log.info("runtime death: %s", death)
        self.deaths.append(death)
        if self.config.restart:
            self._restart(death)
        else:
            self._close_all()
            self._stop.set()

    def _restart(self, note: RuntimeDeath | None) -> None:
        self._close_all()
        self._past_cycles += self.runtime.cycle_counter
        if self.config.restart_delay:
            time.sleep(self.config.restart_delay)
        self.runtime = self._boot(note)


def registry_json(catalog: Catalog | None = None) -> list[dict]:
    """The simulator's registered commands as emitted by ``sim registry --json``."""
    catalog = catalog or default_catalog()
    return [
        {
            "group": spec.group,
            "command": spec.command_id,
            "component": spec.component,
            "name": spec.name,
            "session": spec.session,
        }
        for spec in (catalog.commands[k] for k in catalog.registry())
    ]
