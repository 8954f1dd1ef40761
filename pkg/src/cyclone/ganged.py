"""Atomic cross-log batches coordinated through node-local shared state.

A ganged batch is appended to every participating physical log in one
atomic dispatch step at the node hosting the co-located leaders, stamped
with a nonce and a view vector (each participant's term at dispatch). Each
log replicates its mini-batch independently; execution is gated at apply
time by a barrier shared by the instances of one process.

The barrier decides from *committed log contents*, which every replica
observes identically, so the all-or-nothing outcome is the same at every
replica and after any recovery:

* a participant reaching its mini-entry in apply order sets its mask bit;
* a participant applying any committed entry whose term exceeds its
  stamped view before reaching the mini-entry proves the mini-entry can
  never commit (one committed entry per slot), which fails the gang.

Mask-full means success; a superseded participant means failure and a
retry to the client. The two conditions are mutually exclusive by
consensus safety. Bit-setting is idempotent. A barrier is recycled only
after every participant has either acted on the outcome or been proven
superseded, so late appliers never observe a reused slot.
"""
from __future__ import annotations

import uuid
from dataclasses import dataclass, field

from .wire import NONCE_LEN

PENDING = 0
SUCCESS = 1
FAILED = 2


def pack_nonce(machine_id: int, ticks: int) -> bytes:
    return machine_id.to_bytes(6, "little") + ticks.to_bytes(8, "little")


def unpack_nonce(nonce: bytes) -> tuple[int, int]:
    return int.from_bytes(nonce[:6], "little"), int.from_bytes(nonce[6:], "little")


class NonceSource:
    """Strictly increasing per-process nonce: machine id + tick counter.

    Uniqueness across restarts leans on the clock moving forward between
    a crash and the next dispatch, the usual drift assumption.
    """

    def __init__(self, machine_id: int | None = None):
        self.machine_id = (uuid.getnode() if machine_id is None else machine_id) & (1 << 48) - 1
        self._last = 0

    def next(self, now_us: int) -> bytes:
        ticks = max(self._last + 1, now_us * 1000)
        self._last = ticks
        return pack_nonce(self.machine_id, ticks)


@dataclass(slots=True)
class GangBarrier:
    nonce: bytes
    owner: int                      # co-ordinating log id
    participants: frozenset
    views: dict                     # log_id -> stamped term
    snapshot: bool = False
    mask: set = field(default_factory=set)
    superseded: set = field(default_factory=set)
    failed: bool = False
    outcome: int = PENDING
    acted: set = field(default_factory=set)
    cut: dict = field(default_factory=dict)  # log_id -> entry index (snapshots)

    def complete(self) -> bool:
        return self.outcome != PENDING and (self.acted | self.superseded) >= self.participants


class GangRegistry:
    """Per-node barrier book-keeping shared by all local instances."""

    def __init__(self, on_resolve=None):
        self.barriers: dict[bytes, GangBarrier] = {}
        # log_id -> nonces whose mini-entry on that log is still awaited
        self.waiting_on: dict[int, set[bytes]] = {}
        self.on_resolve = on_resolve
        self.resolved_total = 0

    def _get(self, blob) -> GangBarrier:
        bar = self.barriers.get(blob.nonce)
        if bar is None:
            views = dict(blob.view_vector)
            bar = GangBarrier(
                nonce=blob.nonce,
                owner=min(views) if views else 0,
                participants=frozenset(views),
                views=views,
                snapshot=blob.kind == 3,
            )
            self.barriers[blob.nonce] = bar
            for log_id in bar.participants:
                self.waiting_on.setdefault(log_id, set()).add(blob.nonce)
        return bar

    def register_dispatch(self, bar: GangBarrier) -> None:
        """Install a barrier created by the dispatching node itself."""
        self.barriers[bar.nonce] = bar
        for log_id in bar.participants:
            self.waiting_on.setdefault(log_id, set()).add(bar.nonce)

    def reached(self, log_id: int, blob, entry_index: int) -> GangBarrier:
        """Instance ``log_id`` is at its mini-entry; returns the barrier."""
        bar = self._get(blob)
        if log_id in bar.participants and log_id not in bar.mask:
            bar.mask.add(log_id)
            bar.cut[log_id] = entry_index
            self.waiting_on.get(log_id, set()).discard(bar.nonce)
            self._maybe_resolve(bar)
        return bar

    def observe_term(self, log_id: int, term: int) -> None:
        """Called before applying a committed entry of ``term`` on a log;
        fails every pending gang still waiting on that log with an older
        stamped view (its mini-entry can no longer commit)."""
        pending = self.waiting_on.get(log_id)
        if not pending:
            return
        for nonce in [n for n in pending if term > self.barriers[n].views[log_id]]:
            bar = self.barriers[nonce]
            bar.failed = True
            bar.superseded.add(log_id)
            pending.discard(nonce)
            self._maybe_resolve(bar)

    def acted(self, bar: GangBarrier, log_id: int) -> None:
        bar.acted.add(log_id)
        self._maybe_gc(bar)

    def _maybe_resolve(self, bar: GangBarrier) -> None:
        if bar.outcome != PENDING:
            return
        if bar.failed:
            bar.outcome = FAILED
        elif bar.mask >= bar.participants:
            bar.outcome = SUCCESS
        else:
            return
        self.resolved_total += 1
        for log_id in bar.participants:
            self.waiting_on.get(log_id, set()).discard(bar.nonce)
        if self.on_resolve is not None:
            self.on_resolve(bar)
        self._maybe_gc(bar)

    def _maybe_gc(self, bar: GangBarrier) -> None:
        if bar.complete():
            self.barriers.pop(bar.nonce, None)

    def pending_count(self) -> int:
        return sum(1 for b in self.barriers.values() if b.outcome == PENDING)
