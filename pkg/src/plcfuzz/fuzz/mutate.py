"""Structure-preserving payload mutation.

Only leaf data bytes change.  Tag ids, nesting and child counts are never
touched, so every mutant is still a well-formed request of the seed's shape.
All randomness comes from the ``random.Random`` passed in, which makes a
campaign replayable from its rng seed.
"""

from __future__ import annotations

import random
from typing import Sequence

from ..tags import Tag, get_at, leaves, replace_at, shape

INTERESTING = (0x0, 0x7F, 0x80, 0xFF, 0x7FFF, 0x8000, 0xFFFF, 0x7FFFFFFF, 0xFFFFFFFF, 0x7FFFFFFFFFFFFFFF)
ARITH_MAX = 35
MAX_LEAF = 4096

DEFAULT_WEIGHTS = {
    "bitflip": 4,
    "arith": 4,
    "interesting": 3,
    "dup": 1,
    "trunc": 1,
    "splice": 1,
}


def _bitflip(data: bytearray, rng: random.Random) -> str:
    if not data:
        return "bitflip:empty"
    bit = rng.randrange(len(data) * 8)
    data[bit // 8] ^= 1 << (bit % 8)
    return f"bitflip:{bit}"


def _width(data: bytearray, rng: random.Random) -> tuple[int, int]:
    widths = [w for w in (1, 2, 4, 8) if w <= len(data)]
    if len(data) in (1, 2, 4, 8):
        w = len(data) if rng.random() < 0.6 else rng.choice(widths)
    else:
        w = rng.choice(widths)
    pos = rng.randrange(len(data) - w + 1)
    return w, pos


def _arith(data: bytearray, rng: random.Random) -> str:
    if not data:
        return "arith:empty"
    w, pos = _width(data, rng)
    delta = rng.randint(1, ARITH_MAX) * rng.choice((1, -1))
    value = int.from_bytes(data[pos : pos + w], "little")
    value = (value + delta) % (1 << (8 * w))
    data[pos : pos + w] = value.to_bytes(w, "little")
    return f"arith:{pos}/{w}{delta:+d}"


def _interesting(data: bytearray, rng: random.Random) -> str:
    if not data:
        data.extend(b"\xff")
        return "interesting:grow"
    w, pos = _width(data, rng)
    value = rng.choice(INTERESTING) & ((1 << (8 * w)) - 1)
    data[pos : pos + w] = value.to_bytes(w, "little")
    return f"interesting:{pos}/{w}={value:#x}"


def _dup(data: bytearray, rng: random.Random) -> str:
    if not data or len(data) >= MAX_LEAF:
        return "dup:skip"
    start = rng.randrange(len(data))
    n = rng.randint(1, len(data) - start)
    at = rng.randrange(len(data) + 1)
    data[at:at] = data[start : start + n]
    return f"dup:{start}+{n}@{at}"


def _trunc(data: bytearray, rng: random.Random) -> str:
    if not data:
        return "trunc:empty"
    start = rng.randrange(len(data))
    n = rng.randint(1, len(data) - start)
    del data[start : start + n]
    return f"trunc:{start}+{n}"


_OPS = {"bitflip": _bitflip, "arith": _arith, "interesting": _interesting, "dup": _dup, "trunc": _trunc}


def mutate(
    forest: Sequence[Tag],
    rng: random.Random,
    *,
    pool: Sequence[Sequence[Tag]] = (),
    weights: dict | None = None,
    stack: int | None = None,
) -> tuple[list[Tag], list[str]]:
    """Return ``(mutant, trace)``.

    One to four operations are stacked (``stack`` fixes the count).  Each picks
    a leaf and applies a weighted mutator.  ``splice`` copies the data of the
    leaf at the same index path from a random forest in ``pool`` when that
    leaf has the same id; otherwise it degrades to a bit flip.
    """
    weights = weights or DEFAULT_WEIGHTS
    names = [n for n in weights if weights[n] > 0]
    w = [weights[n] for n in names]
    out = list(forest)
    targets = leaves(out)
    if not targets:
        return out, ["noleaf"]
    trace: list[str] = []
    for _ in range(stack if stack is not None else rng.randint(1, 4)):
        path, _tag = targets[rng.randrange(len(targets))]
        current = get_at(out, path)
        op = rng.choices(names, w)[0]
        data = bytearray(current.data)
        if op == "splice":
            donor = None
            if pool:
                other = pool[rng.randrange(len(pool))]
                try:
                    cand = get_at(other, path)
                except (IndexError, TypeError):
                    cand = None
                if cand is not None and cand.tag_id == current.tag_id and not cand.is_complex:
                    donor = cand.data
            if donor is None:
                note = _bitflip(data, rng)
            else:
                data = bytearray(donor)
                note = "splice"
        else:
            note = _OPS[op](data, rng)
        out = replace_at(out, path, Tag(current.tag_id, bytes(data)))
        trace.append(f"{'.'.join(map(str, path))}:{note}")
    return out, trace


def same_shape(a: Sequence[Tag], b: Sequence[Tag]) -> bool:
    return shape(a) == shape(b)
