"""Bit-exact codec for the four-layer runtime protocol stack.

A frame on the wire is the concatenation of:

    block header    magic:u32 length:u32
    datagram header 0xC5 hop_info settings service_id lengths sender receiver [pad]
    channel header  cmd:u8 flags:u8 channel:u16 blk:u32 ack:u32 remaining:u32 crc:u32
    service layer   (optional) protocol:u16 header_size:u16 group:u16 cmd:u16
                    session:u32 content_size:u32 additional_data protocol_data

All multi-byte integers are little-endian.  ``docs/field_reference.md`` pins
every offset.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, replace

DEFAULT_BLOCK_MAGIC = 0xC0DE5EED
DATAGRAM_MAGIC = 0xC5
PROTOCOL_ID = 0xCD55
MAX_LENGTH = 0xFFFFFFFF
MAX_ADDRESS_UNITS = 15

# datagram service ids
SERVICE_REQUEST = 0x01
SERVICE_RESPONSE = 0x02
SERVICE_CHANNEL = 0x40

# channel command ids
BLK = 0x01
ACK = 0x02
KEEPALIVE = 0x03
OPEN_REQUEST = 0x40
OPEN_CONFIRM = 0xC3

CHANNEL_COMMANDS = {
    BLK: "BLK",
    ACK: "ACK",
    KEEPALIVE: "KEEPALIVE",
    OPEN_REQUEST: "OPEN_REQUEST",
    OPEN_CONFIRM: "OPEN_CONFIRM",
}

_BLOCK = struct.Struct("<II")
_DGRAM = struct.Struct("<BBBBB")
_CHANNEL = struct.Struct("<BBHIIII")
_SERVICE = struct.Struct("<HHHHII")

BLOCK_HEADER_SIZE = _BLOCK.size
CHANNEL_HEADER_SIZE = _CHANNEL.size
SERVICE_HEADER_SIZE = _SERVICE.size


class FrameError(Exception):
    """Base class for codec errors.  ``layer`` names the failing layer."""

    def __init__(self, layer: str, message: str):
        super().__init__(f"{layer}: {message}")
        self.layer = layer


class BadMagic(FrameError):
    pass


class ChecksumMismatch(FrameError):
    pass


class Truncated(FrameError):
    pass


class LengthMismatch(FrameError):
    pass


class InvalidAddress(FrameError):
    def __init__(self, message: str):
        super().__init__("datagram", message)


class OversizePayload(FrameError):
    pass


def crc32(data: bytes) -> int:
    """Standard reflected CRC-32 (poly 0x04C11DB7, init/xorout 0xFFFFFFFF)."""
    return zlib.crc32(data) & 0xFFFFFFFF


@dataclass(frozen=True)
class BlockFrame:
    magic: int = DEFAULT_BLOCK_MAGIC
    length: int = 0


@dataclass(frozen=True)
class DatagramHeader:
    hop_info: int = 0
    packet_settings: int = 0
    service_id: int = SERVICE_CHANNEL
    sender: tuple[int, ...] = (0,)
    receiver: tuple[int, ...] = (0,)
    magic: int = DATAGRAM_MAGIC

    @property
    def hop_count(self) -> int:
        return self.hop_info & 0x1F

    @property
    def hop_flags(self) -> int:
        return self.hop_info >> 5

    @property
    def lengths(self) -> int:
        return (len(self.sender) << 4) | len(self.receiver)

    @property
    def padding(self) -> int:
        return (_DGRAM.size + 2 * (len(self.sender) + len(self.receiver))) & 1

    @property
    def size(self) -> int:
        return _DGRAM.size + 2 * (len(self.sender) + len(self.receiver)) + self.padding


@dataclass(frozen=True)
class ChannelHeader:
    command_id: int = BLK
    flags: int = 0
    channel_id: int = 0
    blk_id: int = 0
    ack_id: int = 0
    remaining_data_size: int = 0
    checksum: int = 0


@dataclass(frozen=True)
class ServiceHeader:
    service_group: int
    command_id: int
    session_id: int = 0
    protocol_data: bytes = b""
    additional_data: bytes = b""
    protocol_id: int = PROTOCOL_ID

    @property
    def header_size(self) -> int:
        return SERVICE_HEADER_SIZE + len(self.additional_data)

    @property
    def content_size(self) -> int:
        return len(self.protocol_data)

    def encode(self) -> bytes:
        return (
            _SERVICE.pack(
                self.protocol_id,
                self.header_size,
                self.service_group,
                self.command_id,
                self.session_id,
                self.content_size,
            )
            + self.additional_data
            + self.protocol_data
        )


@dataclass(frozen=True)
class PacketFrame:
    datagram: DatagramHeader = field(default_factory=DatagramHeader)
    channel: ChannelHeader = field(default_factory=ChannelHeader)
    service: ServiceHeader | None = None
    block: BlockFrame = field(default_factory=BlockFrame)
    leftover: bytes = b""


def _check_address(addr: tuple[int, ...], which: str) -> None:
    if len(addr) > MAX_ADDRESS_UNITS:
        raise InvalidAddress(f"{which} address has {len(addr)} units, max {MAX_ADDRESS_UNITS}")
    for unit in addr:
        if not 0 <= unit <= 0xFFFF:
            raise InvalidAddress(f"{which} address unit {unit:#x} is not 16-bit")


def _encode_parts(frame: PacketFrame) -> tuple[bytes, int, int]:
    """Return (datagram+channel+service bytes, block length, checksum)."""
    dg = frame.datagram
    _check_address(dg.sender, "sender")
    _check_address(dg.receiver, "receiver")
    service = frame.service.encode() if frame.service is not None else b""
    if len(service) > MAX_LENGTH:
        raise OversizePayload("channel", f"service layer of {len(service)} bytes")
    checksum = crc32(service)
    ch = frame.channel
    dgram = bytearray(_DGRAM.pack(dg.magic, dg.hop_info, dg.packet_settings, dg.service_id, dg.lengths))
    for unit in dg.sender + dg.receiver:
        dgram += unit.to_bytes(2, "little")
    if dg.padding:
        dgram.append(0)
    chan = _CHANNEL.pack(
        ch.command_id,
        ch.flags,
        ch.channel_id,
        ch.blk_id,
        ch.ack_id,
        len(service),
        checksum,
    )
    body = bytes(dgram) + chan + service
    if len(body) > MAX_LENGTH:
        raise OversizePayload("block", f"block body of {len(body)} bytes")
    return body, len(body), checksum


def encode_frame(frame: PacketFrame) -> bytes:
    """Serialize ``frame``; length fields and the checksum are recomputed."""
    body, length, _ = _encode_parts(frame)
    return _BLOCK.pack(frame.block.magic, length) + body


def seal(frame: PacketFrame) -> PacketFrame:
    """Return ``frame`` with its derived length and checksum fields filled in."""
    _, length, checksum = _encode_parts(frame)
    remaining = 0 if frame.service is None else frame.service.header_size + frame.service.content_size
    return replace(
        frame,
        block=replace(frame.block, length=length),
        channel=replace(frame.channel, remaining_data_size=remaining, checksum=checksum),
    )


def decode_frame(data: bytes, block_magic: int = DEFAULT_BLOCK_MAGIC) -> PacketFrame:
    """Parse one frame.  Bytes past the declared block length go to ``leftover``.

    Inconsistencies between the block length and the inner headers are blamed
    on the block layer, so a corrupted field never produces an error naming a
    layer further in than the one it belongs to.
    """
    frame, region = decode_outer(data, block_magic)
    if not region:
        return frame
    return replace(frame, service=decode_service(region))


def decode_outer(data: bytes, block_magic: int = DEFAULT_BLOCK_MAGIC) -> tuple[PacketFrame, bytes]:
    """Decode the block, datagram and channel layers only.

    Returns the frame (``service`` left as ``None``) and the raw, checksum
    verified service region for the caller to parse.
    """
    data = bytes(data)
    if len(data) < BLOCK_HEADER_SIZE:
        raise Truncated("block", f"need {BLOCK_HEADER_SIZE} header bytes, have {len(data)}")
    magic, length = _BLOCK.unpack_from(data, 0)
    if magic != block_magic:
        raise BadMagic("block", f"magic {magic:#010x} != {block_magic:#010x}")
    if BLOCK_HEADER_SIZE + length > len(data):
        raise Truncated("block", f"declared length {length} exceeds {len(data) - BLOCK_HEADER_SIZE} available")
    end = BLOCK_HEADER_SIZE + length

    pos = BLOCK_HEADER_SIZE
    if len(data) - pos < _DGRAM.size:
        raise Truncated("datagram", "header cut short")
    dmagic, hop_info, settings, service_id, lengths = _DGRAM.unpack_from(data, pos)
    if dmagic != DATAGRAM_MAGIC:
        raise BadMagic("datagram", f"magic {dmagic:#04x} != {DATAGRAM_MAGIC:#04x}")
    n_sender, n_receiver = lengths >> 4, lengths & 0x0F
    pos += _DGRAM.size
    addr_bytes = 2 * (n_sender + n_receiver)
    if len(data) - pos < addr_bytes:
        raise Truncated("datagram", "addresses cut short")
    units = struct.unpack_from(f"<{n_sender + n_receiver}H", data, pos)
    pos += addr_bytes
    pos += (_DGRAM.size + addr_bytes) & 1
    datagram = DatagramHeader(
        hop_info=hop_info,
        packet_settings=settings,
        service_id=service_id,
        sender=tuple(units[:n_sender]),
        receiver=tuple(units[n_sender:]),
    )

    if len(data) - pos < CHANNEL_HEADER_SIZE:
        raise Truncated("channel", "header cut short")
    cmd, flags, chan_id, blk, ack, remaining, checksum = _CHANNEL.unpack_from(data, pos)
    pos += CHANNEL_HEADER_SIZE
    if pos + remaining != end:
        raise LengthMismatch(
            "block",
            f"block length {length} disagrees with inner headers ({pos - BLOCK_HEADER_SIZE + remaining})",
        )
    region = data[pos:end]
    if crc32(region) != checksum:
        raise ChecksumMismatch("channel", f"checksum {checksum:#010x} != {crc32(region):#010x}")
    channel = ChannelHeader(cmd, flags, chan_id, blk, ack, remaining, checksum)
    frame = PacketFrame(
        datagram=datagram,
        channel=channel,
        block=BlockFrame(magic=magic, length=length),
        leftover=data[end:],
    )
    return frame, region


def decode_service(region: bytes) -> ServiceHeader:
    if len(region) < SERVICE_HEADER_SIZE:
        raise Truncated("service", f"need {SERVICE_HEADER_SIZE} header bytes, have {len(region)}")
    proto, header_size, group, cmd, session, content_size = _SERVICE.unpack_from(region, 0)
    if header_size < SERVICE_HEADER_SIZE:
        raise LengthMismatch("service", f"header_size {header_size} below minimum {SERVICE_HEADER_SIZE}")
    if header_size + content_size != len(region):
        raise LengthMismatch(
            "service",
            f"header_size {header_size} + content_size {content_size} != {len(region)} service bytes",
        )
    return ServiceHeader(
        service_group=group,
        command_id=cmd,
        session_id=session,
        additional_data=region[SERVICE_HEADER_SIZE:header_size],
        protocol_data=region[header_size:],
        protocol_id=proto,
    )


def split_frames(buffer: bytes, block_magic: int = DEFAULT_BLOCK_MAGIC, max_length: int = MAX_LENGTH):
    """Cut complete frames off the front of a TCP byte stream.

    Returns ``(frames, rest)``.  Raises :class:`BadMagic` when the stream is
    out of sync and :class:`OversizePayload` when a declared length exceeds
    ``max_length``.
    """
    frames = []
    pos = 0
    n = len(buffer)
    while n - pos >= BLOCK_HEADER_SIZE:
        magic, length = _BLOCK.unpack_from(buffer, pos)
        if magic != block_magic:
            raise BadMagic("block", f"stream out of sync at offset {pos}")
        if length > max_length:
            raise OversizePayload("block", f"declared length {length} exceeds {max_length}")
        end = pos + BLOCK_HEADER_SIZE + length
        if end > n:
            break
        frames.append(bytes(buffer[pos:end]))
        pos = end
    return frames, bytes(buffer[pos:])


def channel_frame(
    command_id: int,
    channel_id: int = 0,
    *,
    blk_id: int = 0,
    ack_id: int = 0,
    flags: int = 0,
    service: ServiceHeader | None = None,
    sender: tuple[int, ...] = (0,),
    receiver: tuple[int, ...] = (0,),
    block_magic: int = DEFAULT_BLOCK_MAGIC,
) -> PacketFrame:
    """Convenience constructor returning a sealed frame."""
    return seal(
        PacketFrame(
            datagram=DatagramHeader(sender=sender, receiver=receiver),
            channel=ChannelHeader(command_id, flags, channel_id, blk_id, ack_id),
            service=service,
            block=BlockFrame(magic=block_magic),
        )
    )
