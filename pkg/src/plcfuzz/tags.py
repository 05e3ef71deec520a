"""Recursive binary tag (TLV) codec used for all Layer-7 payloads.

Wire form of one tag::

    tag_id:u16le  size:varint  content[size]

``size`` is a little-endian base-128 varint (high bit = continuation) and must
be minimally encoded.  A tag whose id has bit 0x80 set is *complex*: its
content is a concatenation of child tags.  Every other tag is a leaf and its
content is opaque data.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

COMPLEX_BIT = 0x80
MAX_DEPTH = 16
MAX_TAG_SIZE = 0xFFFFFFFF

STATUS_TAG = 0xFF7F
READ_OK_TAG = 0x40
INTERP_FAULT_TAG = 0x41
APP_SESSION_TAG = 0x01
PROGRAM_TAG = 0x10
WRITE_REQUEST_TAG = 0x88
WRITE_DATA_SIZE_TAG = 0x01
WRITE_VALUE_TAG = 0x02
WRITE_OFFSET_TAG = 0x03


class TagError(ValueError):
    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class TagTruncated(TagError):
    pass


class SizeOverrun(TagError):
    pass


class DepthExceeded(TagError):
    pass


class OversizeTag(TagError):
    pass


def is_complex_id(tag_id: int) -> bool:
    return bool(tag_id & COMPLEX_BIT)


@dataclass(frozen=True)
class Tag:
    tag_id: int
    data: bytes = b""
    children: tuple["Tag", ...] = ()

    def __post_init__(self):
        if not 0 <= self.tag_id <= 0xFFFF:
            raise ValueError(f"tag id {self.tag_id:#x} is not 16-bit")
        if is_complex_id(self.tag_id):
            if self.data:
                raise ValueError(f"complex tag {self.tag_id:#x} cannot carry data")
            if not isinstance(self.children, tuple):
                object.__setattr__(self, "children", tuple(self.children))
        elif self.children:
            raise ValueError(f"leaf tag {self.tag_id:#x} cannot have children")

    @property
    def is_complex(self) -> bool:
        return is_complex_id(self.tag_id)

    def find(self, tag_id: int) -> "Tag | None":
        return find(self.children, tag_id)


def leaf(tag_id: int, data: bytes = b"") -> Tag:
    return Tag(tag_id, bytes(data))


def node(tag_id: int, *children: Tag) -> Tag:
    return Tag(tag_id, children=tuple(children))


def u16(value: int) -> bytes:
    return (value & 0xFFFF).to_bytes(2, "little")


def u32(value: int) -> bytes:
    return (value & 0xFFFFFFFF).to_bytes(4, "little")


def as_uint(data: bytes) -> int:
    return int.from_bytes(data, "little")


def _varint(n: int) -> bytes:
    out = bytearray()
    while True:
        b = n & 0x7F
        n >>= 7
        if n:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def _encode(tag: Tag, depth: int, out: bytearray) -> None:
    if depth > MAX_DEPTH:
        raise DepthExceeded(f"nesting deeper than {MAX_DEPTH}")
    if tag.is_complex:
        content = bytearray()
        for child in tag.children:
            _encode(child, depth + 1, content)
    else:
        content = tag.data
    if len(content) > MAX_TAG_SIZE:
        raise OversizeTag(f"tag {tag.tag_id:#x} content of {len(content)} bytes")
    out += tag.tag_id.to_bytes(2, "little")
    out += _varint(len(content))
    out += content


def encode_tag(tag: Tag) -> bytes:
    out = bytearray()
    _encode(tag, 1, out)
    return bytes(out)


def encode_tags(forest: Sequence[Tag]) -> bytes:
    out = bytearray()
    for tag in forest:
        _encode(tag, 1, out)
    return bytes(out)


def _parse(buf: bytes, pos: int, end: int, depth: int) -> list[Tag]:
    if depth > MAX_DEPTH:
        raise DepthExceeded(f"nesting deeper than {MAX_DEPTH}", pos)
    forest = []
    while pos < end:
        start = pos
        if end - pos < 3:
            raise TagTruncated("incomplete tag header", start)
        tag_id = buf[pos] | (buf[pos + 1] << 8)
        pos += 2
        size = 0
        shift = 0
        while True:
            if pos >= end:
                raise TagTruncated("size field cut short", start)
            b = buf[pos]
            pos += 1
            size |= (b & 0x7F) << shift
            shift += 7
            if not b & 0x80:
                if b == 0 and shift > 7:
                    raise TagError("non-minimal size encoding", start)
                break
            if shift >= 35:
                raise OversizeTag("size field longer than 5 bytes", start)
        if size > MAX_TAG_SIZE:
            raise OversizeTag(f"size {size} too large", start)
        if pos + size > end:
            if depth > 1:
                raise SizeOverrun(f"tag {tag_id:#x} of {size} bytes overruns its parent", start)
            raise TagTruncated(f"tag {tag_id:#x} declares {size} bytes, {end - pos} available", start)
        if is_complex_id(tag_id):
            forest.append(Tag(tag_id, children=tuple(_parse(buf, pos, pos + size, depth + 1))))
        else:
            forest.append(Tag(tag_id, bytes(buf[pos : pos + size])))
        pos += size
    return forest


def decode_tags(data: bytes) -> list[Tag]:
    """Parse a whole region into a tag forest; trailing garbage is an error."""
    data = bytes(data)
    return _parse(data, 0, len(data), 1)


def find(forest: Sequence[Tag], tag_id: int) -> Tag | None:
    """Depth-first search for the first tag with ``tag_id``."""
    for tag in forest:
        if tag.tag_id == tag_id:
            return tag
        if tag.children:
            hit = find(tag.children, tag_id)
            if hit is not None:
                return hit
    return None


def find_path(forest: Sequence[Tag], path: Sequence[int]) -> Tag | None:
    """Resolve an id path such as ``(0x81, 0x40)``; ids below the first are searched depth-first."""
    if not path:
        return None
    hit = find(forest, path[0])
    for tag_id in path[1:]:
        if hit is None:
            return None
        hit = find(hit.children, tag_id)
    return hit


def walk(forest: Sequence[Tag], prefix: tuple[int, ...] = ()) -> Iterator[tuple[tuple[int, ...], Tag]]:
    """Yield ``(index_path, tag)`` for every tag in pre-order."""
    for i, tag in enumerate(forest):
        path = prefix + (i,)
        yield path, tag
        if tag.children:
            yield from walk(tag.children, path)


def leaves(forest: Sequence[Tag]) -> list[tuple[tuple[int, ...], Tag]]:
    return [(p, t) for p, t in walk(forest) if not t.is_complex]


def get_at(forest: Sequence[Tag], path: Sequence[int]) -> Tag:
    tag = forest[path[0]]
    for i in path[1:]:
        tag = tag.children[i]
    return tag


def replace_at(forest: Sequence[Tag], path: Sequence[int], new: Tag) -> list[Tag]:
    """Return a copy of ``forest`` with the tag at index ``path`` swapped for ``new``."""
    out = list(forest)
    i = path[0]
    if len(path) == 1:
        out[i] = new
    else:
        parent = out[i]
        out[i] = Tag(parent.tag_id, children=tuple(replace_at(parent.children, path[1:], new)))
    return out


def shape(forest: Sequence[Tag]) -> tuple:
    """Structure fingerprint: ids, nesting and child counts, ignoring leaf data."""
    return tuple((t.tag_id, shape(t.children) if t.is_complex else None) for t in forest)


def depth(forest: Sequence[Tag]) -> int:
    if not forest:
        return 0
    return 1 + max(depth(t.children) for t in forest)


def count(forest: Sequence[Tag]) -> int:
    return sum(1 + count(t.children) for t in forest)


def build_write_request(offset: int, value: bytes) -> Tag:
    """Write request carried next to a monitoring program: size, value and Area0 offset."""
    return node(
        WRITE_REQUEST_TAG,
        leaf(WRITE_DATA_SIZE_TAG, u16(len(value))),
        leaf(WRITE_VALUE_TAG, value),
        leaf(WRITE_OFFSET_TAG, u32(offset)),
    )


def parse_write_request(tag: Tag) -> tuple[int, int, bytes]:
    """Return ``(data_size, offset, value)``; missing parts raise KeyError."""
    parts = {c.tag_id: c.data for c in tag.children}
    try:
        return (
            as_uint(parts[WRITE_DATA_SIZE_TAG]),
            as_uint(parts[WRITE_OFFSET_TAG]),
            parts[WRITE_VALUE_TAG],
        )
    except KeyError as exc:
        raise KeyError(f"write request lacks tag {exc.args[0]:#x}") from None


def _hex(data: bytes, limit: int = 64) -> str:
    text = data[:limit].hex(" ")
    if len(data) > limit:
        text += f" ... (+{len(data) - limit})"
    return text


def pretty_print(tag: Tag | Sequence[Tag], symbols=None, indent: int = 0) -> str:
    """Render a tag (or forest) as an indented tree.

    ``symbols`` is an optional :class:`plcfuzz.catalog.Catalog`; with it the
    status and interpreter-fault tags are annotated with their names.
    """
    if isinstance(tag, Tag):
        forest: Sequence[Tag] = [tag]
    else:
        forest = tag
    lines: list[str] = []
    _pretty(forest, symbols, indent, lines)
    return "\n".join(lines)


def _pretty(forest, symbols, level, lines):
    pad = "  " * level
    for tag in forest:
        if tag.is_complex:
            lines.append(f"{pad}{tag.tag_id:#06x} [{len(tag.children)} children]")
            _pretty(tag.children, symbols, level + 1, lines)
            continue
        note = ""
        if tag.tag_id == STATUS_TAG and tag.data:
            code = as_uint(tag.data[:2])
            name = symbols.status_name(code) if symbols is not None else None
            note = f"  status: {name or 'unknown'} ({code:#04x})"
        elif tag.tag_id == INTERP_FAULT_TAG and tag.data:
            code = tag.data[0]
            name = symbols.interp_name(code) if symbols is not None else None
            note = f"  interpreter: {name or 'unknown'} ({code:#04x})"
        lines.append(f"{pad}{tag.tag_id:#06x} size={len(tag.data)}: {_hex(tag.data)}{note}")
