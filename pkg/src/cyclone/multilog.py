"""A replica process: N physical logs, one shared KV store, one endpoint.

Keys are hash-partitioned across physical logs with a fixed published
64-bit hash, so every operation on a key lands on the same log at every
replica. All instances of one node share a transport endpoint (one lane
per log - the per-instance queue pair) and the node-local pieces that make
ganged operations possible: published terms, the gang barrier registry and
the dispatch tracker.

The co-location controller runs alongside log 0's leader: any other log
whose leader lives elsewhere gets nudged - its current leader first brings
a majority (and the target) fully up to date, then hands leadership over
with a targeted campaign hint - until every leader is on one machine.

Recovery rebuilds the store by merging each log's two levels and replaying
committed entries through the same apply gate the live path uses, so gang
outcomes after a restart match what the cluster decided.
"""
from __future__ import annotations

from .config import ClusterConfig
from .flashlog import DrainEngine, RamFlash, merge_recover, recover_scan
from .ganged import FAILED, PENDING, SUCCESS, GangBarrier, GangRegistry, NonceSource
from .kv import KvStore
from .media import RamMedia
from .nvmlog import NvmRegion
from .raft import LEADER, RaftInstance
from .wire import (
    KIND_GANG,
    KIND_SNAP,
    ClientResp,
    Op,
    Status,
    decode_blob,
    decode_request,
    decode_section,
    gang_extension,
)

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _MASK64
    return h


def route(key: bytes, num_logs: int) -> int:
    """Deterministic key -> physical log id, stable across replicas."""
    if num_logs == 1:
        return 0
    return fnv1a64(key) % num_logs


class _NullClock:
    def charge(self, us: float) -> None:
        pass


class SimClock:
    def __init__(self, net):
        self.net = net

    def charge(self, us: float) -> None:
        self.net.charge(us)


MAX_QUEUED_GANGS = 64


class ReplicaNode:
    """One replica: its physical logs, state machine and service logic."""

    def __init__(self, addr: int, cfg: ClusterConfig, regions, flash_backends,
                 peers: list[int] | None = None, journal: bool = False,
                 drain_enabled: bool = True, sync_flash: bool = False):
        self.addr = addr
        self.cfg = cfg
        self.peers = list(peers) if peers is not None else list(range(cfg.num_replicas))
        self.kv = KvStore(journal=journal)
        self.regions = regions
        self.flash_backends = flash_backends
        self.endpoint = None
        self.clock = _NullClock()
        self.stats = None
        self.published: list[int] = [0] * cfg.num_logs
        self.gangs = GangRegistry(on_resolve=self._gang_resolved)
        self.gang_tracker: dict[bytes, tuple] = {}
        self.gang_queue: list = []
        self.nonces = NonceSource(machine_id=addr + 1)
        self.parked: dict[int, list] = {i: [] for i in range(cfg.num_logs)}
        self.colocation_due = 0
        self._now = 0
        self.drain_enabled = drain_enabled

        import random

        self.instances: list[RaftInstance] = []
        for log_id in range(cfg.num_logs):
            rng = random.Random((addr * 2654435761 + log_id * 40503) & _MASK64)
            inst = RaftInstance(self, log_id, regions[log_id], self.peers, cfg, rng)
            if drain_enabled:
                inst.drain = DrainEngine(regions[log_id], flash_backends[log_id], cfg,
                                         sync=sync_flash)
            self.instances.append(inst)

    # -- construction -------------------------------------------------------

    @classmethod
    def fresh(cls, addr: int, cfg: ClusterConfig, peers=None, journal: bool = False,
              drain_enabled: bool = True) -> "ReplicaNode":
        st = cfg.storage
        regions = [NvmRegion.create(RamMedia(st.nvm_capacity), st.ring_capacity,
                                    st.max_entry_size)
                   for _ in range(cfg.num_logs)]
        flash = [RamFlash(st.flash_initial_size) for _ in range(cfg.num_logs)]
        return cls(addr, cfg, regions, flash, peers, journal, drain_enabled)

    @classmethod
    def recover(cls, addr: int, cfg: ClusterConfig, medias, flash_backends,
                peers=None, journal: bool = False,
                drain_enabled: bool = True) -> "ReplicaNode":
        """Restart from durable state: recover both log levels per physical
        log, replay the committed merged prefix, rejoin as follower."""
        st = cfg.storage
        regions = [NvmRegion.recover(m, st.max_entry_size) for m in medias]
        node = cls(addr, cfg, regions, flash_backends, peers, journal, drain_enabled)
        merged: dict[int, list] = {}
        for log_id in range(cfg.num_logs):
            flash_entries, scan_end = recover_scan(flash_backends[log_id], st.page_size)
            unified = merge_recover(regions[log_id], flash_entries)
            merged[log_id] = [(lsn, decode_blob(payload), payload)
                              for lsn, payload in unified]
            inst = node.instances[log_id]
            if inst.drain is not None:
                flash_max = flash_entries[-1][0] if flash_entries else -1
                inst.drain.restore(scan_end, flash_max)
            entries_here = merged[log_id]
            ring = regions[log_id].entries
            floor_index = floor_term = 0
            if ring and ring[0].index > 1 and entries_here:
                below = ring[0].index - 1
                first = entries_here[0][1].index
                blob = entries_here[below - first][1]
                floor_index, floor_term = blob.index, blob.term
            elif not ring and entries_here:
                last_blob = entries_here[-1][1]
                floor_index, floor_term = last_blob.index, last_blob.term
            inst.floor_index = floor_index
            inst.floor_term = floor_term
            flash_tail_index = 0
            if flash_entries:
                flash_tail_index = merged[log_id][len(flash_entries) - 1][1].index
            inst.commit_index = min(max(inst.commit_index, flash_tail_index),
                                    inst.last_index)
        node._replay(merged)
        return node

    def _replay(self, merged: dict[int, list]) -> None:
        """Re-apply committed prefixes through the live apply gate; gang
        entries resolve exactly as the cluster resolved them."""
        cursors = {log_id: 0 for log_id in merged}
        progress = True
        while progress:
            progress = False
            for log_id, entries in merged.items():
                inst = self.instances[log_id]
                k = cursors[log_id]
                while k < len(entries):
                    _, blob, _ = entries[k]
                    if blob.index > inst.commit_index:
                        break
                    self.observe_apply_term(log_id, blob.term)
                    if blob.kind in (KIND_GANG, KIND_SNAP):
                        bar = self.gangs.reached(log_id, blob, blob.index)
                        if bar.outcome == PENDING:
                            break
                        self._act_on_gang(log_id, bar, blob)
                    elif blob.frames:
                        for frame in blob.frames:
                            req = decode_request(frame)
                            self.kv.apply_op(log_id, req.op, req.key, req.value)
                    k += 1
                    inst.last_applied = blob.index
                    progress = True
                cursors[log_id] = k
        for log_id, entries in merged.items():
            inst = self.instances[log_id]
            if inst.last_applied < inst.floor_index:
                inst.last_applied = inst.floor_index

    # -- transport wiring -----------------------------------------------------

    def attach(self, endpoint, clock=None, stats=None) -> None:
        self.endpoint = endpoint
        self.clock = clock or _NullClock()
        self.stats = stats if stats is not None else getattr(endpoint, "stats", None)

    def poll(self, lane: int, now: int) -> int | None:
        self._now = now
        return self.instances[lane].poll(now)

    def start_timers(self, now: int) -> None:
        for inst in self.instances:
            inst.reset_election_timer(now)
        self.colocation_due = now + self.cfg.timing.colocation_check_us

    # -- published terms --------------------------------------------------------

    def publish(self, log_id: int, term: int) -> None:
        self.published[log_id] = term

    def observe_apply_term(self, log_id: int, term: int) -> None:
        self.gangs.observe_term(log_id, term)

    # -- client-facing helpers ----------------------------------------------------

    def client_respond(self, addr: int, resp: ClientResp) -> None:
        self.endpoint.send(addr, 0, resp)

    def handle_service_request(self, inst, msg, now: int) -> None:
        """Weak reads and ganged batches (anything not logged directly)."""
        req = decode_request(msg.payload.view)
        if req.op == Op.WEAK_GET:
            self._weak_read(inst, msg.src, req, now)
        elif req.op in (Op.GANG, Op.SNAPSHOT):
            if inst.log_id != 0:
                self._respond(msg.src, inst, req.req_id, Status.ERROR)
                return
            if self._gang_inflight():
                if len(self.gang_queue) >= MAX_QUEUED_GANGS:
                    self._respond(msg.src, inst, req.req_id, Status.BUSY)
                    return
                from .transport import retain_message

                retain_message(msg)
                self.gang_queue.append(msg)
                return
            self.dispatch_gang(msg, req, now)
        else:
            self._respond(msg.src, inst, req.req_id, Status.ERROR)

    def _respond(self, addr: int, inst, req_id: int, status: int,
                 value: bytes = b"", hint: int = -1) -> None:
        self.client_respond(addr, ClientResp(
            inst.log_id, self.addr, inst.current_term, req_id, status, hint, value))

    # -- weak reads ----------------------------------------------------------------

    def _weak_read(self, inst, src: int, req, now: int) -> None:
        if not inst.is_leader():
            self._respond(src, inst, req.req_id, Status.NOT_LEADER, hint=inst.leader_hint)
            return
        if req.session_term > inst.current_term:
            self._respond(src, inst, req.req_id, Status.STALE_LEADER)
            return
        barrier = inst.last_index
        if inst.last_applied >= barrier:
            self._serve_weak(inst, src, req.req_id, req.key)
            return
        deadline = now + self.cfg.timing.weak_read_park_us
        self.parked[inst.log_id].append((deadline, barrier, src, req.req_id, req.key))

    def _serve_weak(self, inst, src: int, req_id: int, key: bytes) -> None:
        status, value = self.kv.apply_op(inst.log_id, Op.WEAK_GET, key, b"")
        self._respond(src, inst, req_id, status, value=bytes(value))

    def on_apply_progress(self, inst, now: int) -> None:
        lane = self.parked[inst.log_id]
        if lane:
            still = []
            for item in lane:
                deadline, barrier, src, req_id, key = item
                if inst.last_applied >= barrier and inst.is_leader():
                    self._serve_weak(inst, src, req_id, key)
                else:
                    still.append(item)
            self.parked[inst.log_id] = still
        if inst.drain is not None and self.drain_enabled:
            inst.drain.tick(inst, now)

    # -- ganged operations ------------------------------------------------------------

    def _gang_inflight(self) -> bool:
        return any(self.gangs.barriers.get(nonce) is not None
                   and self.gangs.barriers[nonce].outcome == PENDING
                   for nonce in self.gang_tracker)

    def dispatch_gang(self, msg, req, now: int) -> None:
        """Atomically stamp and inject one ganged batch into every
        participating co-located log (the whole service refuses ganged
        work until leaders are co-located)."""
        snapshot = req.op == Op.SNAPSHOT
        inst0 = self.instances[0]
        if not all(i.is_leader() for i in self.instances):
            self._respond(msg.src, inst0, req.req_id, Status.NOT_COLOCATED)
            return
        if snapshot:
            participants = sorted(range(self.cfg.num_logs))
        else:
            participants = sorted(set(req.sections) | {0})
            if any(p >= self.cfg.num_logs for p in participants):
                self._respond(msg.src, inst0, req.req_id, Status.ERROR)
                return
        for p in participants:
            region = self.regions[p]
            need = len(req.sections.get(p, b"")) + 256
            if region.free_slots() < 1 or region.pool.free_bytes() < need:
                self._respond(msg.src, inst0, req.req_id, Status.LOG_FULL)
                return
        nonce = self.nonces.next(now)
        views = {p: self.instances[p].current_term for p in participants}
        bar = GangBarrier(nonce=nonce, owner=0, participants=frozenset(participants),
                          views=views, snapshot=snapshot)
        self.gangs.register_dispatch(bar)
        self.gang_tracker[nonce] = (msg.src, req.req_id, snapshot)
        ext = gang_extension(nonce, sorted(views.items()))
        kind = KIND_SNAP if snapshot else KIND_GANG
        for p in participants:
            section = req.sections.get(p)
            self.instances[p].append_gang_entry(kind, ext, section, now)

    def gang_reached(self, inst, rec, blob, now: int) -> bool:
        """Apply-time barrier for one mini-entry; False parks the log."""
        bar = self.gangs.reached(inst.log_id, blob, rec.index)
        if bar.outcome == PENDING:
            return False
        self._act_on_gang(inst.log_id, bar, blob)
        return True

    def _act_on_gang(self, log_id: int, bar: GangBarrier, blob) -> None:
        if bar.outcome == SUCCESS and blob.kind == KIND_GANG and blob.section is not None:
            self.kv.apply_batch(log_id, decode_section(blob.section))
        self.gangs.acted(bar, log_id)

    def _gang_resolved(self, bar: GangBarrier) -> None:
        if bar.snapshot and bar.outcome == SUCCESS:
            self.kv.take_snapshot(bar.nonce)
        for log_id in bar.participants:
            inst = self.instances[log_id]
            if inst.apply_blocked:
                inst.apply_committed(self._now)
        track = self.gang_tracker.pop(bar.nonce, None)
        if track is not None:
            src, req_id, snapshot = track
            inst0 = self.instances[0]
            if bar.outcome == SUCCESS:
                value = bar.nonce if snapshot else b""
                self._respond(src, inst0, req_id, Status.OK, value=value)
            else:
                self._respond(src, inst0, req_id, Status.RETRY_GANG)

    def _pump_gang_queue(self, now: int) -> None:
        from .transport import release_chain

        while self.gang_queue and not self._gang_inflight():
            msg = self.gang_queue.pop(0)
            req = decode_request(msg.payload.view)
            self.dispatch_gang(msg, req, now)
            release_chain(msg)

    # -- co-location ---------------------------------------------------------------

    def instance_tick(self, inst, now: int) -> None:
        if inst.log_id == 0:
            if now >= self.colocation_due:
                self.colocation_due = now + self.cfg.timing.colocation_check_us
                self._colocation_pass(now)
            self._pump_gang_queue(now)
        lane = self.parked[inst.log_id]
        if lane:
            still = []
            for item in lane:
                deadline, barrier, src, req_id, key = item
                if now >= deadline:
                    self._respond(src, inst, req_id, Status.BUSY)
                else:
                    still.append(item)
            self.parked[inst.log_id] = still

    def _colocation_pass(self, now: int) -> None:
        from .wire import Nudge

        if not self.instances[0].is_leader():
            return
        for inst in self.instances[1:]:
            if inst.is_leader():
                continue
            hint = inst.leader_hint
            if hint >= 0 and hint != self.addr:
                self.endpoint.send(hint, inst.log_id, Nudge(
                    inst.log_id, self.addr, inst.current_term, self.addr))

    def on_nudge(self, inst, msg, now: int) -> None:
        """Current leader of a mis-located log: sync a majority (and the
        target), then hand over with a campaign hint."""
        from .wire import Campaign

        if not inst.is_leader():
            return
        target = msg.target_node
        if target == self.addr or target not in inst.match_index:
            return
        last = inst.last_index
        synced = 1 + sum(1 for p in inst.peers if inst.match_index.get(p, 0) >= last)
        if inst.match_index.get(target, 0) >= last and synced >= self.cfg.quorum:
            self.endpoint.send(target, inst.log_id, Campaign(
                inst.log_id, self.addr, inst.current_term))
        else:
            inst._send_entries(target, now)

    def on_leadership(self, inst, now: int) -> None:
        if inst.log_id == 0:
            self.colocation_due = now + self.cfg.timing.colocation_check_us

    def instance_deadline(self, inst) -> int | None:
        deadline = None
        lane = self.parked[inst.log_id]
        if lane:
            deadline = min(item[0] for item in lane)
        if inst.log_id == 0:
            due = self.colocation_due
            deadline = due if deadline is None else min(deadline, due)
        return deadline

    # -- introspection ------------------------------------------------------------

    def leaders(self) -> list[int]:
        return [inst.leader_hint for inst in self.instances]

    def is_colocated_leader(self) -> bool:
        return all(inst.is_leader() for inst in self.instances)

    def state_hash(self) -> str:
        return self.kv.state_hash()
