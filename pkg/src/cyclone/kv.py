"""Replicated state machine: an in-memory KV store behind one apply gate.

Apply calls arrive from every physical log's event loop and serialise on a
single boundary; state is a pure function of the applied operation
sequence, which is what makes replica state hashes comparable. Snapshots
are immutable point-in-time copies taken at a ganged barrier cut.

In journal mode the store additionally records, per key, the sequence of
updates it executed and which log executed them; the test harness uses
this for per-key order agreement and read-consistency checks.
"""
from __future__ import annotations

import hashlib
import threading
from collections import OrderedDict

from .wire import Op, Status

SNAPSHOT_KEEP = 4


class KvStore:
    def __init__(self, journal: bool = False):
        self._map: dict[bytes, bytes] = {}
        self._lock = threading.Lock()
        self._snapshots: OrderedDict[bytes, dict[bytes, bytes]] = OrderedDict()
        self.journal_enabled = journal
        self.journal: dict[bytes, list] = {}
        self._seq = 0

    # -- apply path ---------------------------------------------------------

    def apply_op(self, log_id: int, op: int, key: bytes, value: bytes):
        """Execute one operation; returns (status, value)."""
        with self._lock:
            return self._apply_locked(log_id, op, key, value)

    def apply_batch(self, log_id: int, ops) -> list:
        """Execute a mini-batch atomically with respect to snapshots."""
        with self._lock:
            return [self._apply_locked(log_id, op, bytes(k), bytes(v)) for op, k, v in ops]

    def _apply_locked(self, log_id: int, op: int, key: bytes, value: bytes):
        if op == Op.PUT:
            self._map[key] = value
            self._journal(log_id, key, Op.PUT, value)
            return (Status.OK, b"")
        if op == Op.DELETE:
            if key in self._map:
                del self._map[key]
                self._journal(log_id, key, Op.DELETE, None)
                return (Status.OK, b"")
            self._journal(log_id, key, Op.DELETE, None)
            return (Status.NOT_FOUND, b"")
        if op in (Op.GET, Op.WEAK_GET):
            val = self._map.get(key)
            if val is None:
                return (Status.NOT_FOUND, b"")
            return (Status.OK, val)
        return (Status.ERROR, b"")

    def _journal(self, log_id: int, key: bytes, op: int, value: bytes | None) -> None:
        if not self.journal_enabled:
            return
        self._seq += 1
        self.journal.setdefault(key, []).append((self._seq, log_id, op, value))

    # -- snapshots ------------------------------------------------------------

    def take_snapshot(self, snap_id: bytes) -> None:
        with self._lock:
            self._snapshots[snap_id] = dict(self._map)
            self._snapshots.move_to_end(snap_id)
            while len(self._snapshots) > SNAPSHOT_KEEP:
                self._snapshots.popitem(last=False)

    def snapshot_view(self, snap_id: bytes) -> dict[bytes, bytes] | None:
        return self._snapshots.get(snap_id)

    def snapshot_ids(self) -> list[bytes]:
        return list(self._snapshots)

    # -- introspection ---------------------------------------------------------

    def get(self, key: bytes) -> bytes | None:
        return self._map.get(key)

    def __len__(self) -> int:
        return len(self._map)

    def state_hash(self) -> str:
        """Order-independent digest of the full map."""
        h = hashlib.sha256()
        for key in sorted(self._map):
            h.update(len(key).to_bytes(4, "little"))
            h.update(key)
            val = self._map[key]
            h.update(len(val).to_bytes(4, "little"))
            h.update(val)
        return h.hexdigest()
