"""Fuzzing engine: mutation, command discovery, campaigns and triage."""

from .campaign import (
    CampaignConfig,
    CampaignResult,
    DiscoveryResult,
    crash_monitor,
    discover_commands,
    establish,
    record_add_seed,
    restart_await,
    run_campaign,
)
from .iec import IecFuzzConfig, IecFuzzResult, fuzz_iec_app
from .mutate import mutate, same_shape
from .records import CampaignStats, CrashRecord, JsonlStore, PathRecord, Seed, dedup_key, load_seeds, save_seeds
from .triage import group_crashes, triage_report

__all__ = [
    "CampaignConfig",
    "CampaignResult",
    "CampaignStats",
    "CrashRecord",
    "DiscoveryResult",
    "IecFuzzConfig",
    "IecFuzzResult",
    "JsonlStore",
    "PathRecord",
    "Seed",
    "crash_monitor",
    "dedup_key",
    "discover_commands",
    "establish",
    "fuzz_iec_app",
    "group_crashes",
    "load_seeds",
    "mutate",
    "record_add_seed",
    "restart_await",
    "run_campaign",
    "same_shape",
    "save_seeds",
    "triage_report",
]
