"""Reference runtime simulator."""

from .apps import BUILTIN_APPS, AppFault, SimApp
from .runtime import BUGS, NodeStore, Runtime, RuntimeDeath, SimConfig, seed_record_add_payload
from .server import SimServer, StreamConnection, registry_json

__all__ = [
    "BUGS",
    "BUILTIN_APPS",
    "AppFault",
    "NodeStore",
    "Runtime",
    "RuntimeDeath",
    "SimApp",
    "SimConfig",
    "SimServer",
    "StreamConnection",
    "registry_json",
    "seed_record_add_payload",
]
