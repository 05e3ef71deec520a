"""Fuzzing campaigns against component commands, command discovery and crash monitoring."""

from __future__ import annotations

import logging
import random
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..driver import (
    ChannelBroken,
    ConnectRefused,
    CounterInconsistent,
    DriverConfig,
    DriverError,
    DriverSession,
    LogRecord,
    OpenTimeout,
    ReplyTimeout,
    probe_dead,
)
from ..tags import Tag, encode_tags, leaf, replace_at, walk
from .mutate import DEFAULT_WEIGHTS, mutate
from .records import CampaignStats, CrashRecord, JsonlStore, PathRecord, Seed

log = logging.getLogger(__name__)

UNKNOWN_GROUP = 0x301
UNKNOWN_COMMAND = 0x302
GATE_STATUSES = {0x1C: "device", 0x19: "rights", 0x505: "app"}
EXCEPTION_SEVERITY = 8
TRANSPORT_TIMEOUT = ("transport", -1)


# ---------------------------------------------------------------- sessions


def establish(config: DriverConfig, stages: frozenset | set, app: str | None, recorder=None) -> DriverSession:
    """Open a channel and log in as far as ``stages`` requires."""
    session = DriverSession.connect(config=DriverConfig(**vars(config)), recorder=recorder)
    try:
        if "device_login" in stages or "app_login" in stages:
            session.device_login()
        if "app_login" in stages and app:
            session.app_login(app)
    except Exception:
        session.close()
        raise
    return session


def restart_await(
    config: DriverConfig,
    stages: frozenset | set,
    app: str | None,
    *,
    timeout: float = 30.0,
    poll: float = 0.25,
    recorder=None,
) -> DriverSession:
    """Reconnect after a crash: first try at once, then every ``poll`` seconds up to ``timeout``."""
    deadline = time.monotonic() + timeout
    while True:
        try:
            return establish(config, stages, app, recorder)
        except (ConnectRefused, OpenTimeout, ChannelBroken, ReplyTimeout) as exc:
            if time.monotonic() + poll > deadline:
                raise ConnectRefused(f"target did not come back within {timeout}s: {exc}") from None
            time.sleep(poll)


def crash_monitor(
    session: DriverSession,
    error: Exception | None = None,
    *,
    misses: int = 3,
    check_app: bool = False,
    seen_exceptions: set | None = None,
) -> str | None:
    """Classify the session's health after an input.

    Returns a detection kind or ``None``.  ``seen_exceptions`` enables the
    log-based check; it holds the exception messages already accounted for.
    """
    if isinstance(error, CounterInconsistent):
        return "counter_inconsistent"
    if error is not None or not session.alive:
        if probe_dead(session, misses):
            return "channel_dead"
    if check_app and session.app_session_id is not None:
        try:
            if session.read_status().state == "exception":
                return "app_exception"
        except DriverError:
            pass
    if seen_exceptions is not None:
        try:
            fresh = [e for e in session.fetch_logs() if e.severity >= EXCEPTION_SEVERITY and _log_key(e) not in seen_exceptions]
        except DriverError:
            fresh = []
        if fresh:
            seen_exceptions.update(_log_key(e) for e in fresh)
            return "exception_logged"
    return None


def _log_key(entry: LogRecord) -> tuple:
    return (entry.timestamp, entry.component_id, entry.message)


def latest_exception(session: DriverSession) -> str:
    """Most recent exception line in the target log, or an empty string."""
    try:
        entries = session.fetch_logs()
    except DriverError:
        return ""
    for entry in reversed(entries):
        if entry.severity >= EXCEPTION_SEVERITY:
            return entry.message
    return ""


# ---------------------------------------------------------------- discovery


@dataclass
class DiscoveryResult:
    valid: list = field(default_factory=list)
    gated: dict = field(default_factory=dict)
    statuses: dict = field(default_factory=dict)
    probes: int = 0
    elapsed: float = 0.0


def discover_commands(
    session: DriverSession,
    group_range: tuple[int, int] = (0x0000, 0x0130),
    cmd_range: tuple[int, int] = (0x0000, 0x0040),
    *,
    relogin: bool = True,
) -> DiscoveryResult:
    """Enumerate (group, command) tuples by their reply status.

    Ranges are inclusive.  A group is first probed with one command; if that
    answers L7UnknownCmdGrp the rest of the group is skipped.  Tuples that
    answer with a session gate status are still valid and are reported in
    ``gated``.  When a probe knocks out our device session (a Logout or a
    second Login), the driver logs in again and repeats the probe once.
    """
    result = DiscoveryResult()
    start = time.monotonic()

    def probe(g: int, c: int) -> int:
        result.probes += 1
        status = session.send_command(g, c).status
        if status == 0x1C and relogin and session.device_session_id is not None:
            session.device_login()
            result.probes += 1
            status = session.send_command(g, c).status
        return status

    for g in range(group_range[0], group_range[1] + 1):
        first = probe(g, cmd_range[0])
        if first == UNKNOWN_GROUP:
            continue
        for c in range(cmd_range[0], cmd_range[1] + 1):
            status = first if c == cmd_range[0] else probe(g, c)
            if status in (UNKNOWN_GROUP, UNKNOWN_COMMAND):
                continue
            result.valid.append((g, c))
            result.statuses[(g, c)] = status
            if status in GATE_STATUSES:
                result.gated[(g, c)] = GATE_STATUSES[status]
    result.elapsed = time.monotonic() - start
    return result


# ---------------------------------------------------------------- campaigns


@dataclass
class CampaignConfig:
    host: str = "127.0.0.1"
    ports: tuple = (11740,)
    max_inputs: int = 10_000
    duration: float = 60.0
    rng_seed: int = 0
    strategy: str = "mutate"
    weights: dict = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    stack: int | None = None
    app: str | None = None
    reply_timeout: float = 2.0
    keepalive_interval: float = 0.25
    restart_timeout: float = 30.0
    restart_poll: float = 0.25
    stop_on_crash: bool = False
    log_check_every: int = 0
    promote_paths: bool = True
    # enumerate strategy: walk one leaf through start..stop by step
    enum_tag: int = 0x40
    enum_start: int = 0
    enum_stop: int = 0
    enum_step: int = 1
    enum_width: int = 4
    out_dir: str | None = None

    def __post_init__(self):
        if isinstance(self.ports, int):
            self.ports = (self.ports,)
        self.ports = tuple(self.ports)
        if self.strategy not in ("mutate", "replay", "enumerate"):
            raise ValueError(f"unknown strategy {self.strategy!r}")

    def driver_config(self, port: int) -> DriverConfig:
        return DriverConfig(
            host=self.host,
            port=port,
            reply_timeout=self.reply_timeout,
            keepalive_interval=self.keepalive_interval,
        )

    @classmethod
    def from_toml(cls, path: str | Path) -> "CampaignConfig":
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
        doc = doc.get("campaign", doc)
        if "port" in doc:
            doc["ports"] = (doc.pop("port"),)
        return cls(**doc)


@dataclass
class CampaignResult:
    stats: CampaignStats
    paths: JsonlStore
    crashes: JsonlStore
    seeds: list


class _Collector:
    """Serialized view of the shared stores for concurrent workers."""

    def __init__(self, config: CampaignConfig, seeds: Sequence[Seed]):
        out = Path(config.out_dir) if config.out_dir else None
        self.paths = JsonlStore(PathRecord, out / "paths.jsonl" if out else None)
        self.crashes = JsonlStore(CrashRecord, out / "crashes.jsonl" if out else None)
        self.seed_store = JsonlStore(Seed, out / "seeds.jsonl" if out else None)
        self.path_index: dict = {}
        self.seed_status: dict = {}
        self.seeds = list(seeds)
        self.stats = CampaignStats()
        self.lock = threading.Lock()
        self.stop = threading.Event()
        self.start = time.monotonic()
        self._clock_started = False
        for seed in self.seeds:
            self.seed_store.append(seed)

    def start_clock(self) -> None:
        """Campaign time counts from the first delivered input, after login."""
        with self.lock:
            if not self._clock_started:
                self._clock_started = True
                self.start = time.monotonic()

    def record_path(self, seed: Seed, seq: tuple, payload: bytes, forest: list, promote: bool) -> bool:
        key = (seed.routing, seq)
        with self.lock:
            rec = self.path_index.get(key)
            if rec is not None:
                rec.hit_count += 1
                return False
            rec = PathRecord(seed.routing, seq, payload, 1, seed.seed_id)
            self.path_index[key] = rec
            self.stats.unique_paths += 1
            if promote and forest is not None:
                child = Seed(seed.service_group, seed.command_id, list(forest), f"path:{seed.seed_id}", seed.stage_requirements, seed.app)
                self.seeds.append(child)
                self.seed_store.append(child)
        self.paths.append(rec)
        return True

    def record_crash(self, crash: CrashRecord) -> bool:
        with self.lock:
            new = all(c.dedup_key != crash.dedup_key for c in self.crashes.records)
            self.stats.crashes_total += 1
            if new:
                self.stats.unique_crashes += 1
            if self.stats.time_to_first_crash is None:
                self.stats.time_to_first_crash = crash.timestamp
                self.stats.inputs_to_first_crash = crash.input_index
        self.crashes.append(crash)
        return new


def _enumerated(seed: Seed, value: int, config: CampaignConfig) -> tuple[list[Tag], list[str]]:
    for path, tag in walk(seed.tags):
        if tag.tag_id == config.enum_tag and not tag.is_complex:
            data = (value % (1 << (8 * config.enum_width))).to_bytes(config.enum_width, "little")
            return replace_at(seed.tags, path, leaf(tag.tag_id, data)), [f"enumerate:{value:#x}"]
    return list(seed.tags), ["enumerate:no-target"]


def _worker(config: CampaignConfig, port: int, col: _Collector, worker_id: int, nworkers: int, recorder) -> None:
    rng = random.Random(config.rng_seed * 7919 + worker_id)
    drv = config.driver_config(port)
    base = [s for i, s in enumerate(col.seeds) if i % nworkers == worker_id] or list(col.seeds)
    stages = frozenset().union(*(s.stage_requirements for s in base))
    app = config.app or next((s.app for s in base if s.app), None)
    session = establish(drv, stages, app, recorder)
    col.start_clock()
    seen_exc: set | None = None
    if config.log_check_every:
        seen_exc = {_log_key(e) for e in session.fetch_logs() if e.severity >= EXCEPTION_SEVERITY}
    local = list(base)
    enum_value = config.enum_start
    replay_index = 0
    last_seq: dict = {}
    deadline = col.start + config.duration

    while not col.stop.is_set():
        with col.lock:
            if col.stats.inputs_sent >= config.max_inputs:
                break
            col.stats.inputs_sent += 1
            index = col.stats.inputs_sent
        if time.monotonic() > deadline:
            with col.lock:
                col.stats.inputs_sent -= 1
            break

        if config.strategy == "replay":
            if replay_index >= len(base):
                with col.lock:
                    col.stats.inputs_sent -= 1
                break
            seed = base[replay_index]
            replay_index += 1
            forest, trace = list(seed.tags), ["replay"]
        elif config.strategy == "enumerate":
            if enum_value > config.enum_stop:
                with col.lock:
                    col.stats.inputs_sent -= 1
                break
            seed = base[0]
            forest, trace = _enumerated(seed, enum_value, config)
            enum_value += config.enum_step
        else:
            with col.lock:
                local = [s for s in col.seeds if s.routing in {b.routing for b in base}]
            seed = local[rng.randrange(len(local))]
            pool = [s.tags for s in local if s.routing == seed.routing]
            forest, trace = mutate(seed.tags, rng, pool=pool, weights=config.weights, stack=config.stack)
        payload = encode_tags(forest)

        error: Exception | None = None
        seq: tuple = ()
        try:
            reply = session.send_command(seed.service_group, seed.command_id, forest)
            seq = tuple(reply.status_sequence)
        except (ChannelBroken, ReplyTimeout) as exc:
            error = exc
        if error is None:
            col.seed_status.setdefault(seed.seed_id, seq)
            last_seq[seed.routing] = seq
            col.record_path(seed, seq, payload, forest, config.promote_paths and config.strategy == "mutate")
        check_logs = seen_exc if (config.log_check_every and index % config.log_check_every == 0) else None
        kind = None
        if error is not None or check_logs is not None:
            kind = crash_monitor(session, error, seen_exceptions=check_logs)
        if kind is None and isinstance(error, ReplyTimeout):
            col.record_path(seed, (TRANSPORT_TIMEOUT,), payload, None, False)
            continue
        if kind is None:
            continue

        # attribute to the last status sequence of the parent seed, which is stable across repeats
        parent_seq = col.seed_status.get(seed.seed_id, last_seq.get(seed.routing, ()))
        crash = CrashRecord(
            routing=seed.routing,
            input=payload,
            kind=kind,
            last_status_sequence=parent_seq,
            lineage={"seed": seed.seed_id, "trace": trace},
            timestamp=time.monotonic() - col.start,
            app=app if "app_login" in seed.stage_requirements else None,
            input_index=index,
        )
        session.close()
        if kind in ("channel_dead", "counter_inconsistent"):
            col.stats.restarts += 1
            session = restart_await(drv, stages, app, timeout=config.restart_timeout, poll=config.restart_poll, recorder=recorder)
            crash.fault = latest_exception(session)
        else:
            session = establish(drv, stages, app, recorder)
        col.record_crash(crash)
        if seen_exc is not None:
            seen_exc |= {_log_key(e) for e in session.fetch_logs() if e.severity >= EXCEPTION_SEVERITY}
        if config.stop_on_crash:
            col.stop.set()
    session.close()


def run_campaign(config: CampaignConfig, seeds: Sequence[Seed], *, recorder: Callable | None = None) -> CampaignResult:
    """Fuzz the seeds' commands until ``max_inputs``, ``duration`` or (optionally) the first crash.

    One worker runs per port in ``config.ports``; each owns its session and a
    slice of the seed list, and all share the path and crash stores.
    """
    if not seeds:
        raise ValueError("a campaign needs at least one seed")
    col = _Collector(config, seeds)
    n = len(config.ports)
    if n == 1:
        _worker(config, config.ports[0], col, 0, 1, recorder)
    else:
        errors: list = []

        def run(i: int, port: int) -> None:
            try:
                _worker(config, port, col, i, n, recorder)
            except Exception as exc:  # surfaced after join
                errors.append(exc)
                col.stop.set()

        threads = [threading.Thread(target=run, args=(i, p), daemon=True) for i, p in enumerate(config.ports)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if errors:
            raise errors[0]
    col.stats.elapsed = time.monotonic() - col.start
    col.paths.rewrite()
    return CampaignResult(col.stats, col.paths, col.crashes, col.seeds)


def replay_status(session: DriverSession, seed: Seed) -> tuple:
    """Status sequence a single replay of ``seed`` produces."""
    return tuple(session.send_command(seed.service_group, seed.command_id, seed.tags).status_sequence)


def record_add_seed(value: int = 0x00003000, width: int = 4) -> Seed:
    from ..sim.runtime import seed_record_add_payload

    return Seed(0x0F, 0x0D, seed_record_add_payload(value, width), "synthetic:recordAdd", frozenset({"device_login"}))


__all__ = [
    "CampaignConfig",
    "CampaignResult",
    "DiscoveryResult",
    "crash_monitor",
    "discover_commands",
    "establish",
    "latest_exception",
    "record_add_seed",
    "replay_status",
    "restart_await",
    "run_campaign",
]
