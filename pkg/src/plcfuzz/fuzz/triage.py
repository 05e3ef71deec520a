"""Crash triage: group CrashRecords by dedup key and summarize a campaign."""

from __future__ import annotations

import json
from typing import Iterable

from .records import CampaignStats, CrashRecord

STAT_COLUMNS = (
    ("inputs_sent", "Inputs"),
    ("inputs_per_second", "Execution speed (inputs/sec)"),
    ("time_to_first_crash", "First crash (seconds)"),
    ("inputs_to_first_crash", "First crash (inputs)"),
    ("crashes_total", "Total crashes"),
    ("unique_crashes", "Unique crashes"),
    ("unique_paths", "Unique paths"),
)


def group_crashes(crashes: Iterable[CrashRecord]) -> list[dict]:
    groups: dict[str, dict] = {}
    for crash in crashes:
        g = groups.get(crash.dedup_key)
        if g is None:
            groups[crash.dedup_key] = {
                "dedup_key": crash.dedup_key,
                "routing": list(crash.routing),
                "kind": crash.kind,
                "status_sequence": [list(p) for p in crash.last_status_sequence],
                "exemplar": crash.input.hex(),
                "fault": crash.fault,
                "app": crash.app,
                "count": 1,
            }
        else:
            g["count"] += 1
            if not g["fault"] and crash.fault:
                g["fault"] = crash.fault
    return sorted(groups.values(), key=lambda g: (-g["count"], g["dedup_key"]))


def _stat(stats: CampaignStats, key: str):
    value = getattr(stats, key)
    if isinstance(value, float):
        return round(value, 3)
    return value


def triage_report(crashes: Iterable[CrashRecord], stats: CampaignStats | None = None, fmt: str = "text") -> str:
    """Render the crash groups with a stats header mirroring the benchmark table columns."""
    stats = stats or CampaignStats()
    groups = group_crashes(crashes)
    if fmt == "json":
        doc = {"stats": {key: _stat(stats, key) for key, _ in STAT_COLUMNS}, "groups": groups}
        return json.dumps(doc, indent=2, sort_keys=True)
    lines = ["Campaign statistics"]
    for key, label in STAT_COLUMNS:
        value = _stat(stats, key)
        lines.append(f"  {label:<32} {'-' if value is None else value}")
    lines.append("")
    lines.append(f"Crash groups: {len(groups)}")
    for g in groups:
        group, cmd = g["routing"]
        seq = ", ".join(f"{layer}:{code:#x}" for layer, code in g["status_sequence"]) or "-"
        lines.append(f"- {g['dedup_key']}  {g['kind']}  ({group:#06x}, {cmd:#06x})  x{g['count']}")
        lines.append(f"    last status: {seq}")
        if g["app"]:
            lines.append(f"    app: {g['app']}")
        if g["fault"]:
            lines.append(f"    fault: {g['fault']}")
        lines.append(f"    input: {g['exemplar']}")
    return "\n".join(lines) + "\n"
