"""Fuzzing IEC applications through execution control.

Each input is written straight into the application's input variables in
Area0, followed by exactly one single-cycle request and one status read, so
every generated input corresponds to one executed scan cycle.
"""

from __future__ import annotations

import random
import time
from dataclasses import dataclass, field

from ..driver import ChannelBroken, DriverConfig, DriverSession, ReplyTimeout
from ..tags import leaf
from .campaign import crash_monitor, establish, latest_exception, restart_await
from .mutate import mutate
from .records import CampaignStats, CrashRecord, JsonlStore

STAGES = frozenset({"device_login", "app_login"})


@dataclass
class IecFuzzConfig:
    app: str
    host: str = "127.0.0.1"
    port: int = 11740
    max_inputs: int = 1000
    duration: float = 60.0
    rng_seed: int = 0
    reply_timeout: float = 2.0
    keepalive_interval: float = 0.25
    restart_timeout: float = 30.0
    restart_poll: float = 0.25
    stop_on_crash: bool = False
    fault_detail: str = "first"  # "first" (per new fault line), "always" or "never"
    out_dir: str | None = None

    def driver_config(self) -> DriverConfig:
        return DriverConfig(
            host=self.host, port=self.port, reply_timeout=self.reply_timeout, keepalive_interval=self.keepalive_interval
        )


@dataclass
class IecFuzzResult:
    stats: CampaignStats
    crashes: JsonlStore
    variables: list = field(default_factory=list)


def _read_inputs(session: DriverSession) -> list[tuple[str, int, int]]:
    return session.read_app_info()


def fuzz_iec_app(config: IecFuzzConfig, *, recorder=None) -> IecFuzzResult:
    """Mutate the application's input variables, one scan cycle per input.

    ``recorder`` is passed to every driver session, as in :func:`run_campaign`.
    """
    rng = random.Random(config.rng_seed)
    drv = config.driver_config()
    session = establish(drv, STAGES, config.app, recorder)
    variables = _read_inputs(session)
    # the current input values are the seed, one leaf per variable
    seed = [leaf(0x01 + i, session.mem_read(off, width)) for i, (_n, off, width) in enumerate(variables)]
    crashes = JsonlStore(CrashRecord, f"{config.out_dir}/crashes.jsonl" if config.out_dir else None)
    stats = CampaignStats()
    needs_reset = session.read_status().state == "exception"
    seen_faults: set = set()
    start = time.monotonic()

    while stats.inputs_sent < config.max_inputs and time.monotonic() - start < config.duration:
        forest, trace = mutate(seed, rng, weights={"bitflip": 4, "arith": 4, "interesting": 3})
        writes = [(off, t.data) for (_n, off, _w), t in zip(variables, forest)]
        payload = b"".join(data for _, data in writes)
        error = None
        state = "unknown"
        try:
            if needs_reset:
                session.app_control("reset")
                needs_reset = False
            session.mem_write_many(writes)
            stats.inputs_sent += 1
            session.app_control("single_cycle")
            status = session.read_status()
            state = status.state
        except (ChannelBroken, ReplyTimeout) as exc:
            error = exc
        if error is None and state != "exception":
            continue
        if error is None:
            kind, fault = "app_exception", status.exception
            needs_reset = True
        else:
            kind = crash_monitor(session, error) or "channel_dead"
            fault = ""
        crash = CrashRecord(
            routing=(0x02, 0x22),
            input=payload,
            kind=kind,
            last_status_sequence=(("app", 2),),
            lineage={"seed": "area0", "trace": trace},
            timestamp=time.monotonic() - start,
            fault=fault,
            app=config.app,
            input_index=stats.inputs_sent,
        )
        if error is not None:
            session.close()
            stats.restarts += 1
            session = restart_await(
                drv, STAGES, config.app, timeout=config.restart_timeout, poll=config.restart_poll, recorder=recorder
            )
            if config.fault_detail == "always" or (config.fault_detail == "first" and not seen_faults):
                crash.fault = latest_exception(session)
                seen_faults.add(crash.fault)
            needs_reset = session.read_status().state == "exception"
        stats.crashes_total += 1
        if all(c.dedup_key != crash.dedup_key for c in crashes.records):
            stats.unique_crashes += 1
        if stats.time_to_first_crash is None:
            stats.time_to_first_crash = crash.timestamp
            stats.inputs_to_first_crash = crash.input_index
        crashes.append(crash)
        if config.stop_on_crash:
            break
    stats.elapsed = time.monotonic() - start
    session.close()
    return IecFuzzResult(stats, crashes, variables)
