"""Client library: leader discovery, session terms, retries, failover.

One logical flow per client handle, one outstanding request at a time
(closed-loop). The core is transport-agnostic: it emits (destination,
message) actions and consumes responses/timeouts, so the same policy runs
under the simulator and over UDP.

Failover is timeout-driven: a request that gets no answer within the
detection timeout is re-sent to the next replica in turn until the new
leader is found. Retryable statuses (ring full, leaders not co-located
yet, failed ganged batch) re-dispatch after a fixed backoff of twice the
timeout. Retries are at-least-once: a retried update may apply twice.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .errors import RequestInvalid, Unavailable
from .multilog import route
from .transport import PayloadBuffer
from .wire import (
    ClientReq,
    MAX_KEY,
    MAX_VALUE,
    Op,
    Status,
    encode_gang_request,
    encode_request,
    encode_section,
)

RETRYABLE = {Status.LOG_FULL, Status.NOT_COLOCATED, Status.RETRY_GANG, Status.BUSY}


@dataclass(slots=True)
class _Pending:
    req_id: int
    op: int
    log_id: int
    frame: bytes
    dst: int
    sent_at: int
    deadline: int
    attempts: int
    first_sent: int
    backoff_until: int = 0


@dataclass
class ClientStats:
    sent: int = 0
    completed: int = 0
    timeouts: int = 0
    retries: int = 0
    hops: int = 0  # messages exchanged for the last completed op


class ClientCore:
    def __init__(self, cfg, client_id: int, replicas: list[int], stats=None):
        self.cfg = cfg
        self.client_id = client_id
        self.replicas = list(replicas)
        self.num_logs = cfg.num_logs
        self.timeout = cfg.timing.client_timeout_us
        self.max_attempts = 40
        self.leader_cache: dict[int, int] = {}
        self.session_terms: dict[int, int] = {}
        self._next_req = 0
        self.pending: _Pending | None = None
        self.net_stats = stats
        self.stats = ClientStats()
        self._probe = 0
        self._op_msgs = 0

    # -- building requests ---------------------------------------------------

    def _req_id(self) -> int:
        self._next_req += 1
        return (self.client_id << 24) | self._next_req

    def make_request(self, op: int, key: bytes = b"", value: bytes = b"",
                     batch=None):
        """Returns (log_id, frame bytes) for one operation."""
        if len(key) > MAX_KEY or len(value) > MAX_VALUE:
            raise RequestInvalid("key/value exceeds bounds")
        req_id = self._req_id()
        if op == Op.GANG:
            sections: dict[int, list] = {}
            for bop, bkey, bval in batch:
                sections.setdefault(route(bkey, self.num_logs), []).append(
                    (bop, bkey, bval))
            frame = encode_gang_request(
                req_id, {lid: encode_section(ops) for lid, ops in sections.items()})
            return 0, req_id, frame
        if op == Op.SNAPSHOT:
            return 0, req_id, encode_request(req_id, op)
        log_id = route(key, self.num_logs)
        session = self.session_terms.get(log_id, 0) if op == Op.WEAK_GET else 0
        frame = encode_request(req_id, op, key, value, session_term=session)
        if len(frame) > self.cfg.mtu:
            raise RequestInvalid(f"request frame {len(frame)} exceeds mtu")
        return log_id, req_id, frame

    def submit(self, op: int, key: bytes = b"", value: bytes = b"",
               batch=None, now: int = 0):
        """Start one operation; returns the (dst, msg) to send."""
        assert self.pending is None, "one outstanding request per client"
        log_id, req_id, frame = self.make_request(op, key, value, batch)
        dst = self.leader_cache.get(log_id, self.replicas[self._probe % len(self.replicas)])
        self.pending = _Pending(req_id, op, log_id, frame, dst, now,
                                now + self.timeout, 1, now)
        self._op_msgs = 0
        return dst, self._wrap(log_id, frame)

    def _wrap(self, log_id: int, frame: bytes) -> ClientReq:
        self.stats.sent += 1
        self._op_msgs += 1
        return ClientReq(log_id, self.client_id, PayloadBuffer(frame, self.net_stats))

    # -- events ---------------------------------------------------------------

    def handle_response(self, msg, now: int):
        """Returns (status, value, term) when the pending op completes."""
        p = self.pending
        if p is None or msg.req_id != p.req_id:
            return None  # stale response from an abandoned attempt
        self._op_msgs += 1
        status = msg.status
        if p.op == Op.WEAK_GET and msg.term < self.session_terms.get(p.log_id, 0):
            return None  # lower term than the session: never accepted
        if status in (Status.OK, Status.NOT_FOUND):
            self.leader_cache[p.log_id] = msg.src
            if msg.term > self.session_terms.get(p.log_id, 0):
                self.session_terms[p.log_id] = msg.term
            self.pending = None
            self.stats.completed += 1
            self.stats.hops = self._op_msgs
            return (status, msg.value, p.first_sent)
        if status == Status.NOT_LEADER:
            self.leader_cache.pop(p.log_id, None)
            if msg.leader_hint >= 0:
                p.dst = msg.leader_hint
                p.backoff_until = now  # immediate redirect
            else:
                p.backoff_until = now
                p.dst = self._next_replica(p.dst)
            p.deadline = now  # resend on next poll
            return None
        if status == Status.STALE_LEADER:
            self.leader_cache.pop(p.log_id, None)
            p.dst = self._next_replica(p.dst)
            p.deadline = now
            return None
        if status in RETRYABLE:
            self.stats.retries += 1
            p.backoff_until = now + 2 * self.timeout
            p.deadline = p.backoff_until
            return None
        # Permanent error.
        self.pending = None
        self.stats.completed += 1
        return (status, b"", p.first_sent)

    def on_poll(self, now: int):
        """Timeout/backoff driver; returns a (dst, msg) to send, or
        ('fail',) when attempts are exhausted."""
        p = self.pending
        if p is None or now < p.deadline:
            return None
        if p.attempts >= self.max_attempts:
            self.pending = None
            return ("fail",)
        if p.backoff_until and now < p.backoff_until:
            return None
        if not p.backoff_until:
            # Plain timeout: leader unreachable; try replicas in turn.
            self.stats.timeouts += 1
            self.leader_cache.pop(p.log_id, None)
            p.dst = self._next_replica(p.dst)
        p.attempts += 1
        p.sent_at = now
        p.backoff_until = 0
        p.deadline = now + self.timeout
        return (p.dst, self._wrap(p.log_id, p.frame))

    def _next_replica(self, current: int) -> int:
        self._probe += 1
        if current in self.replicas:
            return self.replicas[(self.replicas.index(current) + 1) % len(self.replicas)]
        return self.replicas[self._probe % len(self.replicas)]

    def deadline(self) -> int | None:
        return self.pending.deadline if self.pending else None


class SimClient:
    """Closed-loop simulator client: completes one op, asks the workload
    for the next."""

    def __init__(self, cfg, client_id: int, replicas: list[int], workload=None,
                 on_complete=None, stats=None):
        self.core = ClientCore(cfg, client_id, replicas, stats=stats)
        self.workload = workload
        self.on_complete = on_complete
        self.endpoint = None
        self.results: list[tuple] = []
        self.latencies: list[int] = []
        self.failures = 0
        self.idle = workload is None

    def attach(self, endpoint) -> None:
        self.endpoint = endpoint

    def start(self, now: int) -> None:
        self._issue(now)

    def _issue(self, now: int) -> None:
        if self.workload is None:
            return
        op = self.workload(now)
        if op is None:
            self.idle = True
            return
        self.idle = False
        dst, msg = self.core.submit(now=now, **op)
        self.endpoint.send(dst, msg.log_id, msg)

    def poll(self, lane: int, now: int) -> int | None:
        for msg in self.endpoint.recv_batch(0, 32):
            done = self.core.handle_response(msg, now)
            if done is not None:
                status, value, first_sent = done
                self.latencies.append(now - first_sent)
                self.results.append((now, status, value))
                if self.on_complete is not None:
                    self.on_complete(self, now, status, value)
                if self.core.pending is None:
                    self._issue(now)
        action = self.core.on_poll(now)
        while action is not None:
            if action[0] == "fail":
                self.failures += 1
                self.results.append((now, None, b""))
                self._issue(now)
            else:
                dst, msg = action
                self.endpoint.send(dst, msg.log_id, msg)
            action = self.core.on_poll(now)
        d = self.core.deadline()
        if d is None and not self.idle:
            return now + self.core.timeout
        return d
