"""Campaign records (seeds, paths, crashes, stats) and their JSONL stores."""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Generic, Iterable, Iterator, TypeVar

from ..tags import decode_tags, encode_tags

STAGES = ("device_login", "app_login")


def _routing(value) -> tuple[int, int]:
    g, c = value
    return int(g), int(c)


def _seq(value) -> tuple[tuple[str, int], ...]:
    return tuple((str(layer), int(code)) for layer, code in value)


@dataclass
class Seed:
    service_group: int
    command_id: int
    tags: list
    provenance: str = "synthetic"
    stage_requirements: frozenset = frozenset({"device_login"})
    app: str | None = None

    def __post_init__(self):
        self.stage_requirements = frozenset(self.stage_requirements)
        bad = self.stage_requirements - set(STAGES)
        if bad:
            raise ValueError(f"unknown stage requirements {sorted(bad)}")
        if "app_login" in self.stage_requirements and "device_login" not in self.stage_requirements:
            raise ValueError("app_login requires device_login")

    @property
    def routing(self) -> tuple[int, int]:
        return (self.service_group, self.command_id)

    @property
    def payload(self) -> bytes:
        return encode_tags(self.tags)

    @property
    def seed_id(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.service_group}:{self.command_id}:".encode())
        h.update(self.payload)
        return h.hexdigest()[:12]

    def to_json(self) -> dict:
        return {
            "id": self.seed_id,
            "group": self.service_group,
            "command": self.command_id,
            "payload": self.payload.hex(),
            "provenance": self.provenance,
            "stages": sorted(self.stage_requirements),
            "app": self.app,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Seed":
        return cls(
            service_group=int(doc["group"]),
            command_id=int(doc["command"]),
            tags=decode_tags(bytes.fromhex(doc["payload"])),
            provenance=doc.get("provenance", "synthetic"),
            stage_requirements=frozenset(doc.get("stages", ["device_login"])),
            app=doc.get("app"),
        )


@dataclass
class PathRecord:
    routing: tuple
    status_sequence: tuple
    first_input: bytes
    hit_count: int = 1
    seed_id: str = ""

    def to_json(self) -> dict:
        return {
            "routing": list(self.routing),
            "status_sequence": [list(p) for p in self.status_sequence],
            "first_input": self.first_input.hex(),
            "hit_count": self.hit_count,
            "seed_id": self.seed_id,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "PathRecord":
        return cls(
            _routing(doc["routing"]),
            _seq(doc["status_sequence"]),
            bytes.fromhex(doc["first_input"]),
            int(doc.get("hit_count", 1)),
            doc.get("seed_id", ""),
        )


DETECTION_KINDS = ("channel_dead", "counter_inconsistent", "exception_logged", "app_exception")


def dedup_key(routing, kind: str, last_status_sequence) -> str:
    doc = json.dumps([list(_routing(routing)), kind, [list(p) for p in _seq(last_status_sequence)]])
    return hashlib.sha256(doc.encode()).hexdigest()[:16]


@dataclass
class CrashRecord:
    routing: tuple
    input: bytes
    kind: str
    last_status_sequence: tuple = ()
    lineage: dict = field(default_factory=dict)
    timestamp: float = 0.0
    fault: str = ""
    app: str | None = None
    input_index: int = 0
    dedup_key: str = ""

    def __post_init__(self):
        if self.kind not in DETECTION_KINDS:
            raise ValueError(f"unknown detection kind {self.kind!r}")
        self.routing = _routing(self.routing)
        self.last_status_sequence = _seq(self.last_status_sequence)
        if not self.dedup_key:
            self.dedup_key = dedup_key(self.routing, self.kind, self.last_status_sequence)

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["routing"] = list(self.routing)
        doc["input"] = self.input.hex()
        doc["last_status_sequence"] = [list(p) for p in self.last_status_sequence]
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "CrashRecord":
        doc = dict(doc)
        doc["input"] = bytes.fromhex(doc["input"])
        return cls(**doc)


@dataclass
class CampaignStats:
    inputs_sent: int = 0
    elapsed: float = 0.0
    crashes_total: int = 0
    unique_crashes: int = 0
    unique_paths: int = 0
    time_to_first_crash: float | None = None
    inputs_to_first_crash: int | None = None
    restarts: int = 0

    @property
    def inputs_per_second(self) -> float:
        return self.inputs_sent / self.elapsed if self.elapsed > 0 else 0.0

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["inputs_per_second"] = round(self.inputs_per_second, 2)
        return doc


R = TypeVar("R")


class JsonlStore(Generic[R]):
    """Append-only record store, optionally mirrored to a JSONL file.

    Appends are serialized with a lock so several workers can share a store.
    """

    def __init__(self, kind: type, path: str | Path | None = None):
        self.kind = kind
        self.path = Path(path) if path else None
        self.records: list = []
        self._lock = threading.Lock()
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, record) -> None:
        with self._lock:
            self.records.append(record)
            if self.path is not None:
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(record.to_json(), sort_keys=True) + "\n")

    def rewrite(self) -> None:
        """Flush the whole in-memory list (used for records updated in place)."""
        if self.path is None:
            return
        with self._lock, self.path.open("w", encoding="utf-8") as fh:
            for record in self.records:
                fh.write(json.dumps(record.to_json(), sort_keys=True) + "\n")

    def __iter__(self) -> Iterator:
        return iter(list(self.records))

    def __len__(self) -> int:
        return len(self.records)

    @classmethod
    def load(cls, kind: type, path: str | Path) -> "JsonlStore":
        store = cls(kind)
        store.path = Path(path)
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                store.records.append(kind.from_json(json.loads(line)))
        return store


def load_seeds(path: str | Path) -> list[Seed]:
    return list(JsonlStore.load(Seed, path))


def save_seeds(path: str | Path, seeds: Iterable[Seed]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for seed in seeds:
            fh.write(json.dumps(seed.to_json(), sort_keys=True) + "\n")

