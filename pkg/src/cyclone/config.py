"""Configuration objects for the log service, simulator and benchmarks.

All durations are integer microseconds: the simulator orders events on an
integer clock so that runs are reproducible bit-for-bit, and the UDP
backend converts from ``time.monotonic_ns``.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

MiB = 1024 * 1024

MS = 1000  # microseconds per millisecond


@dataclass(frozen=True)
class TimingProfile:
    """Election/heartbeat/client timers for one deployment flavour."""

    election_min_us: int = 150 * MS
    election_max_us: int = 300 * MS
    heartbeat_us: int = 50 * MS
    client_timeout_us: int = 30 * MS
    weak_read_park_us: int = 100 * MS
    colocation_check_us: int = 100 * MS


#: Standard RAFT ratios, deliberately slow so election races are rare.
DEFAULT_TIMING = TimingProfile()

#: Fast profile used by the failover experiment: 30 ms failure detection
#: at the client with elections quick enough for a ~60 ms service gap.
FAILOVER_TIMING = TimingProfile(
    election_min_us=40 * MS,
    election_max_us=80 * MS,
    heartbeat_us=10 * MS,
    client_timeout_us=30 * MS,
    weak_read_park_us=100 * MS,
    colocation_check_us=20 * MS,
)


@dataclass(frozen=True)
class StorageConfig:
    nvm_capacity: int = 64 * MiB
    ring_capacity: int = 4096
    max_entry_size: int = 9000
    segment_size: int = 128 * 1024
    page_size: int = 4096
    flash_prealloc_chunk: int = 64 * MiB
    flash_initial_size: int = 64 * MiB
    max_outstanding_writes: int = 32
    # Committed+applied entries kept in NVM even though drain could move
    # them out; gives restarted followers a catch-up window because log
    # replay from the flashlog to followers is unsupported.
    drain_retain_slots: int = 1024
    # Drain does not bother writing segments until the ring is at least
    # this full (fraction of ring_capacity), unless explicitly flushed.
    drain_threshold: float = 0.25


@dataclass(frozen=True)
class SimParams:
    """Synthetic cost/latency model for the deterministic simulator.

    Link latency mirrors a ~5us userspace hop with a small exponential
    jitter. The per-iteration and per-message CPU costs are what make
    batching and multiple physical logs pay off in virtual time; they are
    synthetic but the mechanisms they reward (fewer event-loop iterations,
    fewer sends, independent per-log cores) are the real ones.
    """

    hop_delay_us: float = 5.0
    hop_jitter_mean_us: float = 1.0
    drop_probability: float = 0.0
    reorder_probability: float = 0.0
    reorder_extra_us: float = 20.0
    iter_cost_us: float = 1.2
    per_recv_us: float = 0.15
    per_send_us: float = 0.30
    per_persist_us: float = 0.20
    per_byte_us: float = 0.0004
    flash_write_latency_us: float = 200.0
    poll_quantum_us: float = 1.0


@dataclass(frozen=True)
class ClusterConfig:
    num_replicas: int = 3
    num_logs: int = 8
    mtu: int = 9000
    headroom: int = 128
    batch_max: int = 32
    batching: bool = True
    storage: StorageConfig = field(default_factory=StorageConfig)
    timing: TimingProfile = field(default_factory=lambda: DEFAULT_TIMING)
    sim: SimParams = field(default_factory=SimParams)
    # UDP mode only: node id -> (host, port).
    peers: dict[int, tuple[str, int]] = field(default_factory=dict)

    def __post_init__(self):
        if self.num_replicas < 1:
            raise ValueError("num_replicas must be >= 1")
        if self.num_logs < 1:
            raise ValueError("num_logs must be >= 1")

    @property
    def quorum(self) -> int:
        return self.num_replicas // 2 + 1

    def with_changes(self, **kw) -> "ClusterConfig":
        return replace(self, **kw)


def small_storage(
    nvm_capacity: int = 4 * MiB,
    ring_capacity: int = 4096,
    **kw,
) -> StorageConfig:
    """Desk-scale storage sizing for tests and simulated benchmarks."""
    kw.setdefault("flash_initial_size", 4 * MiB)
    kw.setdefault("flash_prealloc_chunk", 4 * MiB)
    return StorageConfig(nvm_capacity=nvm_capacity, ring_capacity=ring_capacity, **kw)


def load_config(path: str | None = None) -> ClusterConfig:
    """Load a cluster config from JSON or TOML.

    Falls back to the ``CYCLONE_CONFIG`` environment variable, then to
    defaults. Only top-level keys that match ClusterConfig/StorageConfig/
    TimingProfile field names are honoured.
    """
    if path is None:
        path = os.environ.get("CYCLONE_CONFIG")
    if not path:
        return ClusterConfig()
    with open(path, "rb") as fh:
        raw = fh.read()
    if path.endswith(".toml"):
        try:
            import tomllib
        except ModuleNotFoundError:  # Python 3.10
            import tomli as tomllib

        data = tomllib.loads(raw.decode())
    else:
        data = json.loads(raw)
    storage = StorageConfig(**data.pop("storage", {}))
    timing = TimingProfile(**data.pop("timing", {}))
    sim = SimParams(**data.pop("sim", {}))
    peers = {int(k): (v[0], int(v[1])) for k, v in data.pop("peers", {}).items()}
    return ClusterConfig(storage=storage, timing=timing, sim=sim, peers=peers, **data)
