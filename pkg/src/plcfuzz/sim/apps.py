"""IEC application models executed by the simulator's scan-cycle executor.

Each application is a short list of operations over its Area0 image.  The
``memmove`` and ``index_write`` operations can be left unchecked to model the
vulnerable library calls of the synthetic benchmark applications.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

STOPPED = "stopped"
RUNNING = "running"
EXCEPTION = "exception"
STATE_CODES = {STOPPED: 0, RUNNING: 1, EXCEPTION: 2}


class AppFault(Exception):
    """Raised by a scan cycle; ``severity`` is ``"app"`` or ``"runtime"``."""

    def __init__(self, kind: str, detail: str, severity: str):
        super().__init__(f"{kind}: {detail}")
        self.kind = kind
        self.detail = detail
        self.severity = severity


@dataclass(frozen=True)
class InputVar:
    name: str
    offset: int
    width: int


@dataclass(frozen=True)
class AppModel:
    name: str
    inputs: tuple[InputVar, ...]
    program: tuple[tuple, ...]
    initial: tuple[tuple[int, bytes], ...] = ()
    # which configured severity applies to unchecked faults: "mmove" or "oob"
    fault_family: str | None = None


def _u16(mem, off):
    return struct.unpack_from("<H", mem, off)[0]


BUILTIN_APPS: dict[str, AppModel] = {
    "Application": AppModel(
        name="Application",
        inputs=(InputVar("in_a", 0, 2), InputVar("in_b", 2, 2), InputVar("in_buf", 4, 32)),
        program=(
            ("add_u16", 0x100, 0, 2),
            ("copy", 0x200, 4, 32),
            ("memmove", 0x240, 16, 4, 0, True),
            ("incr_u32", 0x300),
        ),
        initial=((0, struct.pack("<HH", 10, 20)), (4, bytes(range(32)))),
    ),
    "bf_mmove_1": AppModel(
        name="bf_mmove_1",
        inputs=(InputVar("len", 0, 2), InputVar("src", 2, 32)),
        program=(("memmove", 0x100, 16, 2, 0, False), ("incr_u32", 0x300)),
        initial=((0, struct.pack("<H", 8)), (2, bytes(range(0x41, 0x61)))),
        fault_family="mmove",
    ),
    "oob_1_arr_1": AppModel(
        name="oob_1_arr_1",
        inputs=(InputVar("idx", 0, 2), InputVar("val", 2, 2)),
        program=(("index_write", 0x100, 10, 0, 2, False), ("incr_u32", 0x300)),
        initial=((0, struct.pack("<HH", 3, 7)),),
        fault_family="oob",
    ),
}


@dataclass
class SimApp:
    model: AppModel
    area0_size: int = 0x10000
    area3: bytes = b""
    severity: dict = field(default_factory=lambda: {"mmove": "runtime", "oob": "app"})
    state: str = STOPPED
    cycles: int = 0
    exception: str = ""
    area0: bytearray = field(init=False)

    def __post_init__(self):
        self.area0 = bytearray(self.area0_size)
        self.load_image()

    @property
    def name(self) -> str:
        return self.model.name

    def load_image(self) -> None:
        self.area0[:] = bytes(len(self.area0))
        for off, data in self.model.initial:
            self.area0[off : off + len(data)] = data

    def reset(self) -> None:
        self.load_image()
        self.state = STOPPED
        self.exception = ""

    def scan_cycle(self) -> None:
        """Execute the behaviour program once; may raise :class:`AppFault`."""
        self.cycles += 1
        mem = self.area0
        for op in self.model.program:
            kind = op[0]
            if kind == "add_u16":
                _, dst, a, b = op
                struct.pack_into("<H", mem, dst, (_u16(mem, a) + _u16(mem, b)) & 0xFFFF)
            elif kind == "copy":
                _, dst, src, n = op
                mem[dst : dst + n] = mem[src : src + n]
            elif kind == "incr_u32":
                (_, off) = op
                struct.pack_into("<I", mem, off, (struct.unpack_from("<I", mem, off)[0] + 1) & 0xFFFFFFFF)
            elif kind == "memmove":
                _, dst, dst_size, src, len_off, checked = op
                n = _u16(mem, len_off)
                if n > dst_size:
                    if checked:
                        n = dst_size
                    else:
                        raise AppFault(
                            "buffer_overflow",
                            f"SysMemMove of {n} bytes into {dst_size}-byte buffer at {dst:#x}",
                            self.severity.get("mmove", "runtime"),
                        )
                mem[dst : dst + n] = bytes(mem[src : src + n])
            elif kind == "index_write":
                _, arr, arr_len, idx_off, val_off, checked = op
                idx = _u16(mem, idx_off)
                if idx >= arr_len:
                    if checked:
                        continue
                    raise AppFault(
                        "out_of_bounds_write",
                        f"array index {idx} outside [0, {arr_len}) at {arr:#x}",
                        self.severity.get("oob", "app"),
                    )
                mem[arr + 2 * idx : arr + 2 * idx + 2] = mem[val_off : val_off + 2]
            else:  # pragma: no cover - models are static
                raise ValueError(f"unknown app op {kind}")
