"""Loading and validation of the component/command/status catalog."""

from __future__ import annotations

import re
import sys
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .tags import Tag, as_uint, find_path

SESSION_STAGES = ("none", "device", "app", "app_rights")
DEFAULT_CATALOG = "catalog.toml"


class CatalogError(ValueError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        where = f"{path or '<catalog>'}:{line}: " if line else ""
        super().__init__(where + message)
        self.line = line


_PRED = re.compile(r"^\s*(not\s+)?(exists|eq|in_range|len_gt)\((.*)\)\s*$")


def _parse_path(text: str) -> tuple[int, ...]:
    return tuple(int(part, 0) for part in text.strip().split("/"))


@dataclass(frozen=True)
class Predicate:
    kind: str
    path: tuple[int, ...]
    args: tuple = ()
    negate: bool = False

    @classmethod
    def parse(cls, text: str) -> "Predicate":
        m = _PRED.match(text)
        if not m:
            raise ValueError(f"bad predicate {text!r}")
        negate, kind, inner = bool(m.group(1)), m.group(2), m.group(3)
        parts = [p.strip() for p in inner.split(",")]
        path = _parse_path(parts[0])
        if kind == "exists" and len(parts) == 1:
            args: tuple = ()
        elif kind == "eq" and len(parts) == 2:
            args = (bytes.fromhex(parts[1]),)
        elif kind == "in_range" and len(parts) == 3:
            args = (int(parts[1], 0), int(parts[2], 0))
        elif kind == "len_gt" and len(parts) == 2:
            args = (int(parts[1], 0),)
        else:
            raise ValueError(f"wrong arity in predicate {text!r}")
        return cls(kind, path, args, negate)

    def __call__(self, forest: Sequence[Tag]) -> bool:
        tag = find_path(forest, self.path)
        if tag is None:
            hit = False
        elif self.kind == "exists":
            hit = True
        elif self.kind == "eq":
            hit = tag.data == self.args[0]
        elif self.kind == "in_range":
            hit = not tag.is_complex and self.args[0] <= as_uint(tag.data) <= self.args[1]
        else:
            hit = len(tag.data) > self.args[0]
        return hit != self.negate


@dataclass(frozen=True)
class Component:
    name: str
    group: int
    table3_group: int | None = None
    internal_id: int | None = None


@dataclass(frozen=True)
class CommandSpec:
    group: int
    command_id: int
    name: str
    component: str
    session: str = "device"
    bold: bool = False
    stages: str = ""
    required_tags: tuple[int, ...] = ()
    handler: str | None = None
    tree: tuple[tuple[Predicate | None, int], ...] = ()
    note: str = ""

    @property
    def key(self) -> tuple[int, int]:
        return (self.group, self.command_id)

    def decide(self, forest: Sequence[Tag]) -> int:
        """Evaluate the decision tree; the trailing default always matches."""
        for pred, status in self.tree:
            if pred is None or pred(forest):
                return status
        raise AssertionError("decision tree without default")  # guarded by validation


@dataclass(frozen=True)
class Opcode:
    mnemonic: str
    code: int
    arity: int


@dataclass
class Catalog:
    statuses: dict[int, str]
    components: dict[int, Component]
    commands: dict[tuple[int, int], CommandSpec]
    opcodes: dict[str, Opcode]
    interp_statuses: dict[int, str]
    meta: dict = field(default_factory=dict)
    source: str = ""

    def __post_init__(self):
        self._by_name = {name: code for code, name in self.statuses.items()}

    def status_code(self, name: str) -> int:
        return self._by_name[name]

    def status_name(self, code: int) -> str | None:
        return self.statuses.get(code)

    def interp_name(self, code: int) -> str | None:
        return self.interp_statuses.get(code)

    def component_name(self, group: int) -> str | None:
        comp = self.components.get(group)
        return comp.name if comp else None

    def command(self, group: int, command_id: int) -> CommandSpec | None:
        return self.commands.get((group, command_id))

    def lookup(self, component: str, command: str) -> CommandSpec:
        for spec in self.commands.values():
            if spec.component == component and spec.name == command:
                return spec
        raise KeyError(f"{component}.{command}")

    def registry(self) -> list[tuple[int, int]]:
        return sorted(self.commands)

    def bold_commands(self) -> list[CommandSpec]:
        return [c for c in self.commands.values() if c.bold]

    @property
    def group_space(self) -> tuple[int, int]:
        lo, hi = self.meta.get("group_space", (0, 0x130))
        return lo, hi

    @property
    def command_space(self) -> tuple[int, int]:
        lo, hi = self.meta.get("command_space", (0, 0x40))
        return lo, hi


def _header_lines(text: str, name: str) -> list[int]:
    pattern = re.compile(rf"^\s*\[\[{re.escape(name)}\]\]\s*(#.*)?$")
    return [i for i, line in enumerate(text.splitlines(), start=1) if pattern.match(line)]


def parse_catalog(text: str, source: str = "<catalog>") -> Catalog:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        line = getattr(exc, "lineno", None)
        m = re.search(r"line (\d+)", str(exc))
        if line is None and m:
            line = int(m.group(1))
        raise CatalogError(f"TOML syntax: {exc}", line, source) from None

    def err(msg: str, section: str, index: int) -> CatalogError:
        lines = _header_lines(text, section)
        return CatalogError(msg, lines[index] if index < len(lines) else None, source)

    statuses: dict[int, str] = {}
    names: set[str] = set()
    for i, entry in enumerate(doc.get("status", [])):
        try:
            code, name = int(entry["code"]), str(entry["name"])
        except KeyError as exc:
            raise err(f"status entry lacks {exc.args[0]!r}", "status", i) from None
        if code in statuses:
            raise err(f"duplicate status code {code:#x}", "status", i)
        if name in names:
            raise err(f"duplicate status name {name!r}", "status", i)
        statuses[code] = name
        names.add(name)
    by_name = {n: c for c, n in statuses.items()}

    def status_ref(value, section: str, index: int) -> int:
        if isinstance(value, int):
            if value not in statuses:
                raise err(f"unknown status code {value:#x}", section, index)
            return value
        if value not in by_name:
            raise err(f"unknown status {value!r}", section, index)
        return by_name[value]

    components: dict[int, Component] = {}
    comp_names: set[str] = set()
    for i, entry in enumerate(doc.get("component", [])):
        try:
            comp = Component(
                name=str(entry["name"]),
                group=int(entry["group"]),
                table3_group=entry.get("table3_group"),
                internal_id=entry.get("internal_id"),
            )
        except KeyError as exc:
            raise err(f"component entry lacks {exc.args[0]!r}", "component", i) from None
        if comp.group in components:
            raise err(f"duplicate service group {comp.group:#x}", "component", i)
        if comp.name in comp_names:
            raise err(f"duplicate component {comp.name!r}", "component", i)
        components[comp.group] = comp
        comp_names.add(comp.name)

    commands: dict[tuple[int, int], CommandSpec] = {}
    for i, entry in enumerate(doc.get("command", [])):
        try:
            group, cid, name = int(entry["group"]), int(entry["id"]), str(entry["name"])
        except KeyError as exc:
            raise err(f"command entry lacks {exc.args[0]!r}", "command", i) from None
        if group not in components:
            raise err(f"command {name!r} references unknown group {group:#x}", "command", i)
        if (group, cid) in commands:
            raise err(f"duplicate command ({group:#x}, {cid:#x})", "command", i)
        session = entry.get("session", "device")
        if session not in SESSION_STAGES:
            raise err(f"unknown session stage {session!r}", "command", i)
        raw_tree = entry.get("tree")
        if not raw_tree:
            raise err(f"command {name!r} has no decision tree", "command", i)
        tree = []
        for branch in raw_tree:
            if "default" in branch:
                tree.append((None, status_ref(branch["default"], "command", i)))
                continue
            try:
                pred = Predicate.parse(branch["when"])
            except (KeyError, ValueError) as exc:
                raise err(f"command {name!r}: {exc}", "command", i) from None
            if "status" not in branch:
                raise err(f"command {name!r}: branch without status", "command", i)
            tree.append((pred, status_ref(branch["status"], "command", i)))
        if tree[-1][0] is not None or any(p is None for p, _ in tree[:-1]):
            raise err(f"command {name!r}: decision tree must end with exactly one default branch", "command", i)
        commands[(group, cid)] = CommandSpec(
            group=group,
            command_id=cid,
            name=name,
            component=components[group].name,
            session=session,
            bold=bool(entry.get("bold", False)),
            stages=str(entry.get("stages", "")),
            required_tags=tuple(int(t) for t in entry.get("tags", ())),
            handler=entry.get("handler"),
            tree=tuple(tree),
            note=str(entry.get("note", "")),
        )

    opcodes: dict[str, Opcode] = {}
    codes: set[int] = set()
    for i, entry in enumerate(doc.get("opcode", [])):
        op = Opcode(str(entry["mnemonic"]), int(entry["code"]), int(entry["arity"]))
        if op.mnemonic in opcodes or op.code in codes:
            raise err(f"duplicate opcode {op.mnemonic}", "opcode", i)
        opcodes[op.mnemonic] = op
        codes.add(op.code)

    interp: dict[int, str] = {}
    for i, entry in enumerate(doc.get("interp_status", [])):
        code = int(entry["code"])
        if code in interp:
            raise err(f"duplicate interpreter status {code:#x}", "interp_status", i)
        interp[code] = str(entry["name"])

    return Catalog(statuses, components, commands, opcodes, interp, dict(doc.get("meta", {})), source)


def load_catalog(path: str | Path | None = None) -> Catalog:
    """Load and validate a catalog file; ``None`` loads the shipped default."""
    if path is None:
        return default_catalog()
    path = Path(path)
    return parse_catalog(path.read_text(encoding="utf-8"), str(path))


@lru_cache(maxsize=1)
def default_catalog() -> Catalog:
    text = resources.files("plcfuzz.data").joinpath(DEFAULT_CATALOG).read_text(encoding="utf-8")
    return parse_catalog(text, DEFAULT_CATALOG)


def default_catalog_text() -> str:
    return resources.files("plcfuzz.data").joinpath(DEFAULT_CATALOG).read_text(encoding="utf-8")
