"""Monitoring bytecode: assembler (driver side) and interpreter (simulator side).

The instruction set is deliberately tiny::

    0x00 HALT
    0x01 PUSH_IMM32 u32      push an immediate
    0x02 READ_AREA  u8       pop length, pop offset, emit tag 0x40 with the bytes
    0x03 WRITE_AREA u8       pop length, pop offset, store the next write value
    0x04 CHECK_BOUNDS u8     peek length and offset, fault if outside the area
    0x05 SET_STATUS u8       fault with the given code and stop

Faults end the program and are reported as tag 0x41 whose first byte is the
fault code (see ``FAULT_*``).
"""

from __future__ import annotations

import struct
from typing import Mapping, MutableMapping, Sequence

from .tags import INTERP_FAULT_TAG, READ_OK_TAG, Tag, leaf

HALT = 0x00
PUSH_IMM32 = 0x01
READ_AREA = 0x02
WRITE_AREA = 0x03
CHECK_BOUNDS = 0x04
SET_STATUS = 0x05

MNEMONICS = {
    HALT: "HALT",
    PUSH_IMM32: "PUSH_IMM32",
    READ_AREA: "READ_AREA",
    WRITE_AREA: "WRITE_AREA",
    CHECK_BOUNDS: "CHECK_BOUNDS",
    SET_STATUS: "SET_STATUS",
}

FAULT_INVALID_OPCODE = 0x01
FAULT_STACK = 0x03
FAULT_WRONG_POINTER = 0x05
FAULT_BUFFER_OVERRUN = 0x08
FAULT_DATA_SIZE = 0x0A

AREA_DATA = 0
AREA_CODE = 3
STACK_LIMIT = 16
CANARY = 0x5AF096A5


class CanaryViolation(RuntimeError):
    """The interpreter found its stack canary overwritten."""


class _Fault(Exception):
    def __init__(self, code: int):
        self.code = code


def read_program(offset: int, length: int, area: int = AREA_DATA) -> bytes:
    return (
        bytes([PUSH_IMM32])
        + struct.pack("<I", offset)
        + bytes([PUSH_IMM32])
        + struct.pack("<I", length)
        + bytes([CHECK_BOUNDS, area, READ_AREA, area, HALT])
    )


def write_program(offset: int, length: int, area: int = AREA_DATA) -> bytes:
    return (
        bytes([PUSH_IMM32])
        + struct.pack("<I", offset)
        + bytes([PUSH_IMM32])
        + struct.pack("<I", length)
        + bytes([CHECK_BOUNDS, area, WRITE_AREA, area, HALT])
    )


def write_many_program(spans: Sequence[tuple[int, int]], area: int = AREA_DATA) -> bytes:
    """One program storing several values; ``spans`` holds ``(offset, length)`` pairs."""
    out = bytearray()
    for offset, length in spans:
        out += bytes([PUSH_IMM32]) + struct.pack("<I", offset)
        out += bytes([PUSH_IMM32]) + struct.pack("<I", length)
        out += bytes([CHECK_BOUNDS, area, WRITE_AREA, area])
    out.append(HALT)
    return bytes(out)


def disassemble(program: bytes) -> list[tuple[str, int | None]]:
    out: list[tuple[str, int | None]] = []
    pc = 0
    while pc < len(program):
        op = program[pc]
        pc += 1
        if op == PUSH_IMM32:
            if pc + 4 > len(program):
                out.append(("<truncated>", None))
                break
            out.append(("PUSH_IMM32", struct.unpack_from("<I", program, pc)[0]))
            pc += 4
        elif op in (READ_AREA, WRITE_AREA, CHECK_BOUNDS, SET_STATUS):
            if pc >= len(program):
                out.append(("<truncated>", None))
                break
            out.append((MNEMONICS[op], program[pc]))
            pc += 1
        elif op == HALT:
            out.append(("HALT", None))
        else:
            out.append((f"<invalid {op:#04x}>", None))
    return out


def _bounds(areas: Mapping[int, bytearray], area: int, offset: int, length: int) -> bytearray:
    mem = areas.get(area)
    if mem is None:
        raise _Fault(FAULT_WRONG_POINTER)
    if offset + length > len(mem):
        raise _Fault(FAULT_BUFFER_OVERRUN)
    return mem


def interpret(
    program: bytes,
    areas: MutableMapping[int, bytearray],
    write_values: Sequence[bytes] = (),
    *,
    canary: int = CANARY,
    writable: Sequence[int] = (AREA_DATA,),
) -> list[Tag]:
    """Run ``program`` against ``areas`` and return the reply tags.

    Reads produce one tag 0x40 each; a fault produces a single trailing tag
    0x41.  A successful write program produces no tags.
    """
    if canary != CANARY:
        raise CanaryViolation(f"stack canary {canary:#010x}")
    out: list[Tag] = []
    stack: list[int] = []
    values = iter(write_values)
    pc = 0
    n = len(program)

    def pop() -> int:
        if not stack:
            raise _Fault(FAULT_STACK)
        return stack.pop()

    try:
        while pc < n:
            op = program[pc]
            pc += 1
            if op == HALT:
                break
            if op == PUSH_IMM32:
                if pc + 4 > n:
                    raise _Fault(FAULT_INVALID_OPCODE)
                if len(stack) >= STACK_LIMIT:
                    raise _Fault(FAULT_STACK)
                stack.append(struct.unpack_from("<I", program, pc)[0])
                pc += 4
                continue
            if op not in MNEMONICS:
                raise _Fault(FAULT_INVALID_OPCODE)
            if pc >= n:
                raise _Fault(FAULT_INVALID_OPCODE)
            arg = program[pc]
            pc += 1
            if op == SET_STATUS:
                raise _Fault(arg)
            if op == CHECK_BOUNDS:
                if len(stack) < 2:
                    raise _Fault(FAULT_STACK)
                _bounds(areas, arg, stack[-2], stack[-1])
                continue
            length = pop()
            offset = pop()
            if op == READ_AREA:
                mem = _bounds(areas, arg, offset, length)
                out.append(leaf(READ_OK_TAG, bytes(mem[offset : offset + length])))
            else:
                if arg not in writable:
                    raise _Fault(FAULT_WRONG_POINTER)
                mem = _bounds(areas, arg, offset, length)
                value = next(values, None)
                if value is None or len(value) != length:
                    raise _Fault(FAULT_DATA_SIZE)
                mem[offset : offset + length] = value
    except _Fault as fault:
        out.append(leaf(INTERP_FAULT_TAG, bytes([fault.code & 0xFF])))
    return out
