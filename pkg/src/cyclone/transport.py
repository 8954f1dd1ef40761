"""Datagram transport with zero-copy buffer chaining and two backends.

A payload travels as a ``PayloadBuffer``: a reference-counted handle over
bytes that already live somewhere (a client frame, or a log's payload
arena). Multicasting builds one small header object per destination and
chains them all to the same handle; nothing in the in-process path ever
duplicates payload bytes, and ``NetStats.payload_copies`` counts the
(forbidden) materialisations so tests can hold the line at zero.

The simulator backend is a single-threaded discrete-event loop over an
integer microsecond clock. Every source of randomness (link jitter, drops,
reordering) is drawn from one seeded generator, so identical seeds and
fault schedules replay byte-identical traces. Virtual time also models CPU
cost per event-loop iteration, per message and per persisted byte; that is
what lets batching, physical-log parallelism and replica count show their
relative effects reproducibly.

The UDP backend binds one socket per node and keeps the same interface;
serialisation copies there are counted separately (``udp_serializations``)
because leaving the process genuinely requires them.
"""
from __future__ import annotations

import heapq
import json
import socket
import struct
import threading
import time

from .errors import HeadroomExceeded, SendTooLarge
from .wire import MsgType, decode_message, encode_message


class NetStats:
    __slots__ = (
        "sends", "deliveries", "drops", "payload_copies", "udp_serializations",
        "max_recv_batch", "batch_wait_timers",
    )

    def __init__(self):
        self.sends = 0
        self.deliveries = 0
        self.drops = 0
        self.payload_copies = 0
        self.udp_serializations = 0
        self.max_recv_batch = 0
        self.batch_wait_timers = 0


class PayloadBuffer:
    """Reference-counted handle over payload bytes.

    ``on_final_release`` typically returns an arena range to its pool.
    ``tobytes()`` is the audited copy path; ``tobytes_raw()`` is for
    serialisation boundaries that are exempt by contract (UDP, journals).
    """

    __slots__ = ("view", "refs", "on_final_release", "stats")

    def __init__(self, data, stats: NetStats | None = None, on_final_release=None):
        self.view = data if isinstance(data, memoryview) else memoryview(data)
        self.refs = 1
        self.on_final_release = on_final_release
        self.stats = stats

    def __len__(self) -> int:
        return len(self.view)

    def retain(self, n: int = 1) -> "PayloadBuffer":
        self.refs += n
        return self

    def release(self) -> None:
        self.refs -= 1
        if self.refs == 0 and self.on_final_release is not None:
            self.on_final_release()

    def tobytes(self) -> bytes:
        if self.stats is not None:
            self.stats.payload_copies += 1
        return self.view.tobytes()

    def tobytes_raw(self) -> bytes:
        return self.view.tobytes()


def release_chain(msg) -> None:
    chain = getattr(msg, "chain", None)
    if chain is not None:
        for buf in chain:
            buf.release()
    payload = getattr(msg, "payload", None)
    if payload is not None:
        payload.release()


def retain_message(msg) -> None:
    chain = getattr(msg, "chain", None)
    if chain is not None:
        for buf in chain:
            buf.retain()
    payload = getattr(msg, "payload", None)
    if payload is not None:
        payload.retain()


class Lane:
    """One instance's receive context (the per-instance NIC queue pair)."""

    __slots__ = ("queue", "stats")

    def __init__(self, stats: NetStats):
        self.queue: list = []
        self.stats = stats

    def recv_batch(self, max_msgs: int = 32) -> list:
        """Return up to ``max_msgs`` queued packets, immediately; never
        waits for a fuller batch."""
        if not self.queue:
            return []
        batch = self.queue[:max_msgs]
        del self.queue[:max_msgs]
        if len(batch) > self.stats.max_recv_batch:
            self.stats.max_recv_batch = len(batch)
        return batch


# --------------------------------------------------------------------------
# deterministic simulator

_WAKE, _DELIVER = 0, 1


class SimNet:
    """Seeded discrete-event network with fault injection.

    Actors register an endpoint with one lane per instance. Delivery,
    drops, reorder delays and partitions are applied per packet; actor
    polls are scheduled honouring each (addr, lane) virtual core's busy
    time so protocol work has a cost in virtual time.
    """

    def __init__(self, params, seed: int = 0, mtu: int = 9000, headroom: int = 128,
                 trace_path: str | None = None):
        import random

        self.params = params
        self.mtu = mtu
        self.headroom = headroom
        self.rng = random.Random(seed)
        self.seed = seed
        self.now = 0
        self._seq = 0
        self._heap: list = []
        self.endpoints: dict[int, "SimEndpoint"] = {}
        self.partitions: list[tuple[int, int, frozenset, frozenset]] = []
        self.killed: set[int] = set()
        self.stats = NetStats()
        self._busy: dict[tuple[int, int], float] = {}
        self._pending_poll: dict[tuple[int, int], int] = {}
        self._poll_cost = 0.0
        self._trace = open(trace_path, "w") if trace_path else None

    # -- wiring ---------------------------------------------------------

    def endpoint(self, addr: int, lanes: int, actor) -> "SimEndpoint":
        ep = SimEndpoint(self, addr, lanes, actor)
        self.endpoints[addr] = ep
        return ep

    def kill(self, addr: int) -> None:
        self.killed.add(addr)

    def revive(self, addr: int) -> None:
        self.killed.discard(addr)
        for key in list(self._busy):
            if key[0] == addr:
                del self._busy[key]

    def add_partition(self, start_us: int, end_us: int, group_a, group_b) -> None:
        """Cut links between the two groups during [start, end). Addresses
        in neither group stay connected to everyone."""
        self.partitions.append((start_us, end_us, frozenset(group_a), frozenset(group_b)))

    def _cut(self, a: int, b: int, t: int) -> bool:
        for start, end, ga, gb in self.partitions:
            if start <= t < end and ((a in ga and b in gb) or (a in gb and b in ga)):
                return True
        return False

    # -- sending ----------------------------------------------------------

    def send(self, src: int, dst: int, lane: int, msg) -> None:
        p = self.params
        self.stats.sends += 1
        size = msg.size()
        self._poll_cost += p.per_send_us + p.per_byte_us * size
        self._emit("send", src, dst, msg, size)
        if size > self.mtu:
            release_chain(msg)
            raise SendTooLarge(f"{size} > mtu {self.mtu}")
        if dst not in self.endpoints or dst in self.killed or src in self.killed:
            self.stats.drops += 1
            release_chain(msg)
            return
        if self._cut(src, dst, self.now):
            self.stats.drops += 1
            self._emit("cut", src, dst, msg, size)
            release_chain(msg)
            return
        if p.drop_probability and self.rng.random() < p.drop_probability:
            self.stats.drops += 1
            self._emit("drop", src, dst, msg, size)
            release_chain(msg)
            return
        delay = p.hop_delay_us
        if p.hop_jitter_mean_us:
            delay += self.rng.expovariate(1.0 / p.hop_jitter_mean_us)
        if p.reorder_probability and self.rng.random() < p.reorder_probability:
            delay += self.rng.uniform(0, p.reorder_extra_us)
        self._push(self.now + max(1, int(delay)), _DELIVER, (src, dst, lane, msg))

    def multicast(self, src: int, payload: "PayloadBuffer", destinations, header_fn,
                  lane: int = 0) -> None:
        """One header per destination, all chained to one payload handle.

        ``header_fn(dst)`` builds the per-destination message; the payload
        reference count rises by one per destination and transmit is
        flushed (scheduled) before returning.
        """
        for dst in destinations:
            msg = header_fn(dst)
            hdr_size = msg.size() - len(payload)
            if hdr_size > self.headroom:
                raise HeadroomExceeded(f"header {hdr_size} > headroom {self.headroom}")
            payload.retain()
            self.send(src, dst, lane, msg)

    # -- scheduling --------------------------------------------------------

    def _push(self, when: int, kind: int, data) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (when, self._seq, kind, data))

    def wake(self, addr: int, lane: int, when: int) -> None:
        """Ensure the (addr, lane) actor polls no later than ``when``."""
        when = max(when, self.now)
        key = (addr, lane)
        pending = self._pending_poll.get(key)
        if pending is not None and pending <= when:
            return
        self._pending_poll[key] = when
        self._push(when, _WAKE, key)

    def charge(self, cost_us: float) -> None:
        self._poll_cost += cost_us

    def step(self, until: int) -> int:
        """Advance virtual time, delivering packets and polling actors."""
        processed = 0
        while self._heap and self._heap[0][0] <= until:
            when, _, kind, data = heapq.heappop(self._heap)
            self.now = when
            processed += 1
            if kind == _DELIVER:
                src, dst, lane, msg = data
                ep = self.endpoints.get(dst)
                if ep is None or dst in self.killed or self._cut(src, dst, when):
                    self.stats.drops += 1
                    release_chain(msg)
                    continue
                self.stats.deliveries += 1
                self._emit("deliver", src, dst, msg, msg.size())
                ep.lanes[lane].queue.append(msg)
                self.wake(dst, lane, when + int(self.params.poll_quantum_us))
            else:
                key = data
                if self._pending_poll.get(key) != when:
                    continue  # superseded by an earlier wake
                del self._pending_poll[key]
                addr, lane = key
                ep = self.endpoints.get(addr)
                if ep is None or addr in self.killed:
                    continue
                busy = self._busy.get(key, 0.0)
                if busy > when:
                    self.wake(addr, lane, int(busy))
                    continue
                self._poll_cost = self.params.iter_cost_us
                next_wake = ep.actor.poll(lane, when)
                self._busy[key] = when + self._poll_cost
                if ep.lanes[lane].queue:
                    self.wake(addr, lane, int(when + self._poll_cost))
                elif next_wake is not None:
                    self.wake(addr, lane, int(next_wake))
        self.now = max(self.now, until)
        return processed

    def run_until_idle(self, limit_us: int) -> None:
        self.step(limit_us)

    def _emit(self, event: str, src: int, dst: int, msg, size: int) -> None:
        if self._trace is None:
            return
        self._trace.write(json.dumps({
            "time": self.now, "event": event, "src": src, "dst": dst,
            "msg_type": int(msg.mtype), "size": size,
        }) + "\n")

    def close(self) -> None:
        if self._trace:
            self._trace.close()


class SimEndpoint:
    __slots__ = ("net", "addr", "lanes", "actor")

    def __init__(self, net: SimNet, addr: int, lanes: int, actor):
        self.net = net
        self.addr = addr
        self.lanes = [Lane(net.stats) for _ in range(lanes)]
        self.actor = actor

    def send(self, dst: int, lane: int, msg) -> None:
        self.net.send(self.addr, dst, lane, msg)

    def multicast(self, payload, destinations, header_fn, lane: int = 0) -> None:
        self.net.multicast(self.addr, payload, destinations, header_fn, lane)

    def recv_batch(self, lane: int, max_msgs: int = 32) -> list:
        return self.lanes[lane].recv_batch(max_msgs)

    @property
    def now(self) -> int:
        return self.net.now


# --------------------------------------------------------------------------
# UDP backend

_DGRAM_HDR = struct.Struct("<H")  # lane


class UdpEndpoint:
    """Loss-tolerant datagram backend over one socket per node.

    No reliability is added: the consensus protocol owns retries. The
    actor is driven by a thread that polls the socket and fires wakeups.
    """

    def __init__(self, addr: int, bind_host: str, bind_port: int,
                 peer_table: dict[int, tuple[str, int]], lanes: int, actor,
                 mtu: int = 9000):
        self.addr = addr
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind((bind_host, bind_port))
        self.sock.settimeout(0.0005)
        self.port = self.sock.getsockname()[1]
        self.peers = dict(peer_table)
        self.stats = NetStats()
        self.lanes = [Lane(self.stats) for _ in range(lanes)]
        self.actor = actor
        self.mtu = mtu
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def register_peer(self, addr: int, host: str, port: int) -> None:
        self.peers[addr] = (host, port)

    @property
    def now(self) -> int:
        return time.monotonic_ns() // 1000

    def send(self, dst: int, lane: int, msg) -> None:
        target = self.peers.get(dst)
        if target is None:
            release_chain(msg)
            return
        data = _DGRAM_HDR.pack(lane) + encode_message(msg)
        self.stats.udp_serializations += 1
        self.stats.sends += 1
        if len(data) > self.mtu + 64:
            release_chain(msg)
            raise SendTooLarge(f"datagram {len(data)} exceeds mtu")
        try:
            self.sock.sendto(data, target)
        except OSError:
            pass
        release_chain(msg)

    def multicast(self, payload, destinations, header_fn, lane: int = 0) -> None:
        for dst in destinations:
            payload.retain()
            self.send(dst, lane, header_fn(dst))

    def recv_batch(self, lane: int, max_msgs: int = 32) -> list:
        return self.lanes[lane].recv_batch(max_msgs)

    def start(self) -> None:
        self._thread = threading.Thread(target=self._loop, daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._thread:
            self._thread.join(timeout=2.0)
        self.sock.close()

    def _loop(self) -> None:
        deadlines = [0] * len(self.lanes)
        while not self._stop.is_set():
            try:
                data, _ = self.sock.recvfrom(65535)
                (lane,) = _DGRAM_HDR.unpack_from(data, 0)
                msg = decode_message(data[_DGRAM_HDR.size:],
                                     lambda b: PayloadBuffer(b, self.stats))
                if lane < len(self.lanes):
                    self.lanes[lane].queue.append(msg)
            except socket.timeout:
                pass
            except OSError:
                break
            now = self.now
            for lane in range(len(self.lanes)):
                if self.lanes[lane].queue or now >= deadlines[lane]:
                    nxt = self.actor.poll(lane, now)
                    deadlines[lane] = nxt if nxt is not None else now + 1000
