"""Cluster harness over the deterministic simulator, plus the safety
monitor and the seeded fault traces the verification suites run.

A trace is fully determined by (config, seed, fault plan): the network,
election jitter, workload and fault times all derive from seeded
generators, so any run can be replayed bit-for-bit. The monitor checks
consensus invariants as the trace runs - election safety exactly (hooked
into leadership wins), prefix agreement / leader completeness / commit
irrevocability incrementally over committed entries - and convergence is
asserted by comparing replica state hashes after the trace quiesces.
"""
from __future__ import annotations

import hashlib
import zlib

from .client import SimClient
from .config import FAILOVER_TIMING, ClusterConfig, small_storage
from .multilog import ReplicaNode, SimClock
from .transport import SimNet
from .wire import Op, Status

CLIENT_BASE = 10_000


class SafetyMonitor:
    def __init__(self):
        self.leaders: dict[tuple[int, int], int] = {}   # (log, term) -> addr
        self.committed: dict[tuple[int, int], tuple[int, int]] = {}
        self.violations: list[str] = []
        self._floor: dict[tuple[int, int], int] = {}

    # -- hooks ---------------------------------------------------------------

    def leader_elected(self, log_id: int, term: int, addr: int) -> None:
        prev = self.leaders.setdefault((log_id, term), addr)
        if prev != addr:
            self.violations.append(
                f"election safety: log {log_id} term {term} led by {prev} and {addr}")

    def observe(self, cluster: "SimCluster") -> None:
        """Record newly committed entries and check prefix agreement."""
        for addr, node in cluster.nodes.items():
            if addr in cluster.net.killed:
                continue
            for inst in node.instances:
                key = (addr, inst.log_id)
                start = self._floor.get(key, 0) + 1
                for idx in range(start, inst.commit_index + 1):
                    rec = inst.entry_at(idx)
                    if rec is None:
                        continue  # already drained here; others record it
                    sig = (rec.term, zlib.crc32(inst.region.payload(rec)))
                    k = (inst.log_id, idx)
                    prev = self.committed.setdefault(k, sig)
                    if prev != sig:
                        self.violations.append(
                            f"log matching: log {inst.log_id} index {idx} "
                            f"committed as {prev} and {sig}")
                self._floor[key] = max(self._floor.get(key, 0), inst.commit_index)

    def finalize(self, cluster: "SimCluster") -> None:
        """Committed entries must survive in every live replica's log and
        in particular in any current leader's."""
        self.observe(cluster)
        for addr, node in cluster.nodes.items():
            if addr in cluster.net.killed:
                continue
            for inst in node.instances:
                for (log_id, idx), sig in self.committed.items():
                    if log_id != inst.log_id or idx <= inst.floor_index:
                        continue
                    if idx > inst.last_index:
                        if inst.is_leader():
                            self.violations.append(
                                f"leader completeness: node {addr} leads log {log_id} "
                                f"without committed index {idx}")
                        continue
                    rec = inst.entry_at(idx)
                    sig_here = (rec.term, zlib.crc32(inst.region.payload(rec)))
                    if sig_here != sig and idx <= inst.commit_index:
                        self.violations.append(
                            f"commit irrevocability: node {addr} log {log_id} "
                            f"index {idx} diverged")


class SimCluster:
    def __init__(self, cfg: ClusterConfig, seed: int, journal: bool = False,
                 drain: bool = False, monitor: SafetyMonitor | None = None,
                 trace_path: str | None = None):
        self.cfg = cfg
        self.seed = seed
        self.net = SimNet(cfg.sim, seed, cfg.mtu, cfg.headroom, trace_path)
        self.monitor = monitor
        self.journal = journal
        self.drain = drain
        self.nodes: dict[int, ReplicaNode] = {}
        self.clients: list[SimClient] = []
        self.storage: dict[int, tuple[list, list]] = {}
        for addr in range(cfg.num_replicas):
            node = ReplicaNode.fresh(addr, cfg, journal=journal, drain_enabled=drain)
            self._install(addr, node)

    def _install(self, addr: int, node: ReplicaNode) -> None:
        node.monitor = self.monitor
        ep = self.net.endpoint(addr, self.cfg.num_logs, node)
        node.attach(ep, SimClock(self.net), stats=self.net.stats)
        node.start_timers(self.net.now)
        self.nodes[addr] = node
        self.storage[addr] = ([r.media for r in node.regions], node.flash_backends)
        for lane in range(self.cfg.num_logs):
            self.net.wake(addr, lane, self.net.now)

    # -- clients ---------------------------------------------------------------

    def add_client(self, workload=None, on_complete=None) -> SimClient:
        cid = CLIENT_BASE + len(self.clients)
        client = SimClient(self.cfg, cid, list(range(self.cfg.num_replicas)),
                           workload, on_complete, stats=self.net.stats)
        ep = self.net.endpoint(cid, 1, client)
        client.attach(ep)
        self.clients.append(client)
        return client

    def start_clients(self) -> None:
        for c in self.clients:
            c.start(self.net.now)
            self.net.wake(c.core.client_id, 0, self.net.now)

    # -- running ------------------------------------------------------------------

    def run(self, until_us: int, observe_every_us: int = 5000) -> None:
        now = self.net.now
        while now < until_us:
            now = min(now + observe_every_us, until_us)
            self.net.step(now)
            if self.monitor is not None:
                self.monitor.observe(self)

    # -- faults ---------------------------------------------------------------------

    def kill(self, addr: int) -> None:
        self.net.kill(addr)

    def restart(self, addr: int) -> None:
        medias, flash = self.storage[addr]
        node = ReplicaNode.recover(addr, self.cfg, medias, flash,
                                   journal=self.journal, drain_enabled=self.drain)
        self.net.revive(addr)
        self._install(addr, node)

    def leader_of(self, log_id: int) -> int | None:
        best = None
        for addr, node in self.nodes.items():
            if addr in self.net.killed:
                continue
            inst = node.instances[log_id]
            if inst.is_leader():
                if best is None or inst.current_term > best[1]:
                    best = (addr, inst.current_term)
        return best[0] if best else None

    def alive(self) -> list[int]:
        return [a for a in self.nodes if a not in self.net.killed]

    def colocated_node(self) -> int | None:
        for addr in self.alive():
            if self.nodes[addr].is_colocated_leader():
                return addr
        return None

    # -- state ----------------------------------------------------------------------

    def state_hashes(self) -> dict[int, str]:
        return {a: self.nodes[a].state_hash() for a in self.alive()}

    def fingerprint(self) -> str:
        """Digest of all replica state; equal across seed replays."""
        h = hashlib.sha256()
        for addr in sorted(self.nodes):
            node = self.nodes[addr]
            h.update(bytes([addr & 0xFF, addr in self.net.killed]))
            for inst in node.instances:
                h.update(f"{inst.current_term}:{inst.commit_index}:"
                         f"{inst.last_applied}:{inst.role}".encode())
            h.update(node.state_hash().encode())
        return h.hexdigest()


def trace_config(replicas: int = 3, logs: int = 1, *, drop: float = 0.0,
                 reorder: float = 0.0, batching: bool = True,
                 timing=FAILOVER_TIMING, ring: int = 512,
                 nvm_capacity: int = 1 << 20) -> ClusterConfig:
    cfg = ClusterConfig(
        num_replicas=replicas,
        num_logs=logs,
        batching=batching,
        storage=small_storage(nvm_capacity=nvm_capacity, ring_capacity=ring),
        timing=timing,
    )
    return cfg.with_changes(sim=cfg.sim.__class__(
        drop_probability=drop, reorder_probability=reorder))


# ------------------------------------------------------------------------------
# seeded verification traces (top-level so multiprocessing can run them)

def _put_workload(seed: int, salt: int, horizon: int, keys: int = 16):
    import random

    rng = random.Random(seed * 31 + salt)

    def workload(now):
        if now > horizon:
            return None
        return {"op": Op.PUT, "key": b"k%d" % rng.randrange(keys),
                "value": b"v%d.%d.%d" % (seed, salt, rng.randrange(1 << 20))}

    return workload


def run_safety_trace(args) -> dict:
    """One fault-injected consensus trace; returns violations and stats."""
    seed, replicas, logs, duration_ms = args
    import random

    rng = random.Random(seed * 7919 + 13)
    drop = rng.choice([0.0, 0.05, 0.2])
    reorder = rng.choice([0.0, 0.1])
    cfg = trace_config(replicas, logs, drop=drop, reorder=reorder)
    monitor = SafetyMonitor()
    cluster = SimCluster(cfg, seed, monitor=monitor)
    horizon = duration_ms * 1000

    for i in range(2):
        cluster.add_client(_put_workload(seed, i, horizon))
    cluster.start_clients()

    # Fault plan: leader kills/restarts and partition windows.
    events = []
    t = rng.randrange(20_000, 60_000)
    while t < horizon:
        events.append(t)
        t += rng.randrange(40_000, 90_000)
    dead: list[int] = []
    for when in events:
        cluster.run(when)
        roll = rng.random()
        if dead and roll < 0.5:
            cluster.restart(dead.pop())
        elif roll < 0.8 and len(dead) < (replicas - 1) // 2 + 1:
            victims = [a for a in cluster.alive()]
            leader = cluster.leader_of(0)
            victim = leader if (leader is not None and rng.random() < 0.7) else rng.choice(victims)
            cluster.kill(victim)
            dead.append(victim)
        else:
            side = rng.sample(range(replicas), k=rng.randrange(1, replicas))
            rest = [a for a in range(replicas) if a not in side]
            span = rng.randrange(30_000, 80_000)
            cluster.net.add_partition(cluster.net.now, cluster.net.now + span, side, rest)
    cluster.run(horizon)
    while dead:
        cluster.restart(dead.pop())
    cluster.run(horizon + 300_000)  # heal and quiesce

    monitor.finalize(cluster)
    hashes = set(cluster.state_hashes().values())
    if len(hashes) > 1:
        monitor.violations.append(f"replica divergence after quiesce: {hashes}")
    ops = sum(len(c.results) for c in cluster.clients)
    return {"seed": seed, "violations": monitor.violations, "ops": ops,
            "deliveries": cluster.net.stats.deliveries}


def check_gang_atomicity(node: ReplicaNode, batch_sizes: dict[bytes, int]) -> list[str]:
    """All-or-nothing judged from the per-key apply journal: every
    dispatch of a gang applied either none or all of its writes, so the
    per-marker apply count is a multiple of that gang's batch size
    (multiples above one are client retries, which are at-least-once)."""
    problems = []
    seen: dict[bytes, int] = {}
    for key, entries in node.kv.journal.items():
        for _seq, _log, op, value in entries:
            if op != Op.PUT or value is None or not value.startswith(b"g!"):
                continue
            marker = value.rsplit(b"#", 1)[0]
            seen[marker] = seen.get(marker, 0) + 1
    for marker, count in seen.items():
        size = batch_sizes.get(marker)
        if size is None:
            problems.append(f"unknown gang marker {marker!r}")
        elif count % size != 0:
            gangs = node.gangs
            problems.append(
                f"gang torn at node {node.addr}: {marker!r} applied {count} of {size}")
    return problems


def run_gang_trace(args) -> dict:
    """One fault-injected ganged-operation trace."""
    seed, logs, kills = args
    import random

    rng = random.Random(seed * 104729 + 7)
    cfg = trace_config(3, logs)
    monitor = SafetyMonitor()
    cluster = SimCluster(cfg, seed, journal=True, monitor=monitor)
    horizon = 700_000

    batch_sizes: dict[bytes, int] = {}
    counter = [0]
    grng = random.Random(seed * 17 + 5)

    def workload(now):
        if now > horizon:
            return None
        n = counter[0]
        counter[0] += 1
        marker = b"g!%d.%d" % (seed, n)
        nkeys = grng.randrange(2, 9)
        keys = grng.sample(range(64), nkeys)
        batch = [(Op.PUT, b"gk%d" % k, marker + b"#%d" % i)
                 for i, k in enumerate(keys)]
        batch_sizes[marker] = nkeys
        return {"op": Op.GANG, "batch": batch}

    client = cluster.add_client(workload)
    cluster.add_client(_put_workload(seed, 77, horizon, keys=32))
    cluster.run(150_000)  # let leaders co-locate
    cluster.start_clients()

    dead: list[int] = []
    for _ in range(kills):
        when = cluster.net.now + rng.randrange(40_000, 140_000)
        cluster.run(min(when, horizon))
        if dead:
            cluster.restart(dead.pop())
            continue
        leader = cluster.leader_of(0)
        if leader is not None:
            cluster.kill(leader)
            dead.append(leader)
    cluster.run(horizon)
    while dead:
        cluster.restart(dead.pop())
    cluster.run(horizon + 400_000)

    violations = list(monitor.violations)
    for addr in cluster.alive():
        pend = cluster.nodes[addr].gangs.pending_count()
        if pend:
            violations.append(f"barrier deadlock: node {addr} has {pend} pending")
        violations.extend(check_gang_atomicity(cluster.nodes[addr], batch_sizes))
    hashes = set(cluster.state_hashes().values())
    if len(hashes) > 1:
        violations.append(f"replica divergence: {hashes}")
    return {"seed": seed, "violations": violations, "gangs": counter[0],
            "retries": client.core.stats.retries,
            "completed": client.core.stats.completed,
            "failures": client.failures}
