"""One physical log's consensus instance, structured as event handlers.

Each instance owns one NVM-backed log and runs on its own event loop
lane. The handlers follow the standard leader-election / log-replication
protocol with a few shape choices that matter here:

* a client batch is whatever one burst receive returned (capped at 32 and
  by the entry size limit) chained into a single log entry; batching never
  waits on a timer;
* an entry is persisted to the local log before it is multicast to
  followers, and followers persist before acknowledging - one ack per
  message regardless of entry count;
* the leader commits an entry of its own term once a majority of rings
  hold it, and applies (and answers clients) immediately at commit;
* election winners append a no-op so commit progress and cross-log
  barrier decisions never stall behind an idle log.

Entries below the drain floor have left the NVM ring; followers that far
behind cannot be caught up from this log (replay from the flashlog is
deliberately unsupported) and simply keep answering heartbeats.
"""
from __future__ import annotations

from .errors import EntryTooLarge, LogFull
from .transport import PayloadBuffer
from .wire import (
    KIND_BATCH,
    KIND_NOOP,
    Append,
    AppendResp,
    ClientResp,
    EntryMeta,
    MsgType,
    Op,
    Status,
    VoteReq,
    VoteResp,
    blob_header,
    decode_blob,
    decode_request,
    frame_prefix,
)

FOLLOWER, CANDIDATE, LEADER = 0, 1, 2

_BLOB_HDR_LEN = 19
_FRAME_PREFIX_LEN = 4


class RaftInstance:
    def __init__(self, node, log_id: int, region, peers: list[int], cfg, rng):
        self.node = node
        self.log_id = log_id
        self.region = region
        self.peers = [p for p in peers if p != node.addr]
        self.cfg = cfg
        self.rng = rng

        self.role = FOLLOWER
        self.current_term = region.meta.term
        self.voted_for = region.meta.voted_for
        self.leader_hint = -1
        self.commit_index = region.meta.commit_index
        self.last_applied = 0  # node rebuild advances this
        self.floor_index = 0
        self.floor_term = 0

        self.next_index: dict[int, int] = {}
        self.match_index: dict[int, int] = {}
        self.votes: set[int] = set()

        self.election_deadline = 0
        self.heartbeat_due = 0
        self.responders: dict[int, tuple] = {}  # index -> client addrs
        self.apply_blocked = False
        self.drain = None  # DrainEngine, attached by the node

        node.publish(log_id, self.current_term)

    # ------------------------------------------------------------------ state

    @property
    def last_index(self) -> int:
        ents = self.region.entries
        return ents[-1].index if ents else self.floor_index

    @property
    def last_term(self) -> int:
        ents = self.region.entries
        return ents[-1].term if ents else self.floor_term

    def entry_at(self, index: int):
        ents = self.region.entries
        if not ents or index < ents[0].index or index > ents[-1].index:
            return None
        return ents[index - ents[0].index]

    def term_at(self, index: int) -> int:
        if index == 0:
            return 0
        if index == self.floor_index:
            return self.floor_term
        rec = self.entry_at(index)
        return rec.term if rec else -1

    def is_leader(self) -> bool:
        return self.role == LEADER

    # ------------------------------------------------------------- transitions

    def _persist_meta(self, flush: bool = True) -> None:
        self.region.set_meta(self.current_term, self.voted_for, self.commit_index, flush=flush)

    def set_term(self, term: int) -> None:
        """Advance the term; published before any message of the new term."""
        self.current_term = term
        self.voted_for = -1
        self._persist_meta(flush=True)
        self.node.publish(self.log_id, term)

    def become_follower(self, term: int, now: int, leader_hint: int = -1) -> None:
        if term > self.current_term:
            self.set_term(term)
        self.role = FOLLOWER
        self.votes.clear()
        if leader_hint >= 0:
            self.leader_hint = leader_hint
        self.reset_election_timer(now)

    def reset_election_timer(self, now: int) -> None:
        t = self.cfg.timing
        self.election_deadline = now + self.rng.randrange(t.election_min_us, t.election_max_us)

    def start_election(self, now: int) -> None:
        self.role = CANDIDATE
        self.set_term(self.current_term + 1)
        self.voted_for = self.node.addr
        self._persist_meta(flush=True)  # vote durable before it leaves the node
        self.votes = {self.node.addr}
        self.leader_hint = -1
        self.reset_election_timer(now)
        if self._maybe_win(now):
            return
        for peer in self.peers:
            self.node.endpoint.send(peer, self.log_id, VoteReq(
                self.log_id, self.node.addr, self.current_term,
                self.last_index, self.last_term))

    def _maybe_win(self, now: int) -> bool:
        if len(self.votes) < self.cfg.quorum:
            return False
        self.role = LEADER
        self.leader_hint = self.node.addr
        nxt = self.last_index + 1
        self.next_index = {p: nxt for p in self.peers}
        self.match_index = {p: 0 for p in self.peers}
        self.heartbeat_due = now
        self._append_noop(now)
        self.node.on_leadership(self, now)
        return True

    def _append_noop(self, now: int) -> None:
        index = self.last_index + 1
        hdr = blob_header(self.current_term, index, KIND_NOOP, 0)
        try:
            self.region.append(self.current_term, index, [hdr], len(hdr))
        except LogFull:
            return  # ring saturated; commit progress waits for drain
        self.node.clock.charge(self.cfg.sim.per_persist_us * 2)
        self._replicate_new(now)

    # --------------------------------------------------------------- client path

    def handle_client_batch(self, reqs: list, now: int) -> None:
        """Chain buffered client requests into log entries (at most 32 and
        one entry's size budget per entry), persist, then multicast."""
        if self.role != LEADER:
            return  # dropped silently; client timeout redirects it
        group: list = []
        group_payload = 0
        limit = self.cfg.batch_max if self.cfg.batching else 1
        for msg in reqs:
            flen = len(msg.payload)
            projected = _BLOB_HDR_LEN + group_payload + _FRAME_PREFIX_LEN + flen
            if group and (len(group) >= limit or projected > self.region.max_entry_size):
                self._append_batch(group, now)
                group, group_payload = [], 0
            group.append(msg)
            group_payload += _FRAME_PREFIX_LEN + flen
        if group:
            self._append_batch(group, now)

    def _append_batch(self, group: list, now: int) -> None:
        index = self.last_index + 1
        hdr = blob_header(self.current_term, index, KIND_BATCH, len(group))
        chunks = [hdr]
        total = len(hdr)
        for msg in group:
            chunks.append(frame_prefix(len(msg.payload)))
            chunks.append(msg.payload.view)
            total += _FRAME_PREFIX_LEN + len(msg.payload)
        try:
            self.region.append(self.current_term, index, chunks, total)
        except (LogFull, EntryTooLarge) as exc:
            status = Status.LOG_FULL if isinstance(exc, LogFull) else Status.ERROR
            for msg in group:
                req_id = int.from_bytes(msg.payload.view[:8], "little")
                self.node.client_respond(msg.src, ClientResp(
                    self.log_id, self.node.addr, self.current_term, req_id, status))
            return
        self.node.clock.charge(
            self.cfg.sim.per_persist_us * 2 + self.cfg.sim.per_byte_us * total)
        self.responders[index] = tuple(msg.src for msg in group)
        self._replicate_new(now)
        if self.cfg.quorum == 1:
            self.advance_commit(now)

    def append_gang_entry(self, kind: int, nonce_ext: bytes, section, now: int) -> int:
        """Append one ganged mini-entry; the node dispatches these only
        after validating leadership and capacity on every participant."""
        index = self.last_index + 1
        hdr = blob_header(self.current_term, index, kind, 0)
        chunks = [hdr, nonce_ext]
        total = len(hdr) + len(nonce_ext)
        if section is not None:
            chunks.append(section)
            total += len(section)
        self.region.append(self.current_term, index, chunks, total)
        self.node.clock.charge(
            self.cfg.sim.per_persist_us * 2 + self.cfg.sim.per_byte_us * total)
        self._replicate_new(now)
        if self.cfg.quorum == 1:
            self.advance_commit(now)
        return index

    def _replicate_new(self, now: int) -> None:
        """Multicast the newest entry to every follower that is current.

        Followers that are catching up keep their own pacing via acks; the
        fresh entry rides the shared payload handle with zero copies.
        """
        ents = self.region.entries
        if not ents:
            return
        rec = ents[-1]
        current = [p for p in self.peers if self.next_index.get(p, 0) == rec.index]
        if current:
            buf = self._entry_buffer(rec)
            meta = EntryMeta(rec.term, rec.index, rec.length)
            prev_term = self.term_at(rec.index - 1)
            self.node.endpoint.multicast(
                buf,
                current,
                lambda dst: Append(self.log_id, self.node.addr, self.current_term,
                                   rec.index - 1, prev_term, self.commit_index,
                                   [meta], (buf,)),
                lane=self.log_id,
            )
            buf.release()
            for p in current:
                self.next_index[p] = rec.index + 1
        for p in self.peers:
            if self.next_index.get(p, 0) <= rec.index:
                self._send_entries(p, now)

    def _entry_buffer(self, rec) -> PayloadBuffer:
        pool = self.region.pool
        pool.pin(rec.offset)
        return PayloadBuffer(self.region.payload(rec), self.node.stats,
                             on_final_release=lambda off=rec.offset: pool.release(off))

    def _send_entries(self, peer: int, now: int) -> None:
        ni = self.next_index.get(peer, self.last_index + 1)
        if ni <= self.floor_index:
            # Needed entries were drained; this follower cannot be caught
            # up from the ring. Keep heartbeating so leadership holds.
            self._send_heartbeat(peer)
            return
        if ni > self.last_index:
            self._send_heartbeat(peer)
            return
        budget = self.cfg.mtu
        metas: list[EntryMeta] = []
        chain: list[PayloadBuffer] = []
        idx = ni
        while idx <= self.last_index and len(metas) < self.cfg.batch_max:
            rec = self.entry_at(idx)
            if rec.length > budget:
                break
            budget -= rec.length
            metas.append(EntryMeta(rec.term, rec.index, rec.length))
            chain.append(self._entry_buffer(rec))
            idx += 1
        if not metas:
            self._send_heartbeat(peer)
            return
        prev = ni - 1
        self.node.endpoint.send(peer, self.log_id, Append(
            self.log_id, self.node.addr, self.current_term, prev, self.term_at(prev),
            self.commit_index, metas, tuple(chain)))
        self.next_index[peer] = idx

    def _send_heartbeat(self, peer: int) -> None:
        self.node.endpoint.send(peer, self.log_id, Append(
            self.log_id, self.node.addr, self.current_term,
            self.last_index, self.last_term, self.commit_index, [], ()))

    # ---------------------------------------------------------- replica handlers

    def on_append(self, msg: Append, now: int) -> None:
        if msg.term < self.current_term:
            self.node.endpoint.send(msg.src, self.log_id, AppendResp(
                self.log_id, self.node.addr, self.current_term, False, 0, self.last_index))
            return
        if msg.term > self.current_term or self.role != FOLLOWER:
            self.become_follower(msg.term, now, leader_hint=msg.src)
        else:
            self.reset_election_timer(now)
        self.leader_hint = msg.src

        if msg.prev_index > self.last_index:
            self._nack(msg.src, hint=self.last_index)
            return
        if msg.prev_index > self.floor_index:
            pterm = self.term_at(msg.prev_index)
            if pterm != msg.prev_term:
                self._nack(msg.src, hint=min(msg.prev_index - 1, self.last_index))
                return
        # prev at or below the floor is committed ground truth here.

        appended = 0
        busy = False
        for meta, buf in zip(msg.metas, msg.chain):
            if meta.index <= self.floor_index:
                continue
            existing = self.entry_at(meta.index)
            if existing is not None:
                if existing.term == meta.term:
                    continue
                self.region.truncate_back(meta.index)  # conflicting suffix
                self.responders.clear()
            try:
                self.region.append(meta.term, meta.index, [buf.view], meta.length)
                appended += 1
            except LogFull:
                busy = True
                break
        if appended:
            self.node.clock.charge(
                self.cfg.sim.per_persist_us * 2
                + self.cfg.sim.per_byte_us * sum(m.length for m in msg.metas[:appended]))
        new_commit = min(msg.commit, self.last_index)
        if new_commit > self.commit_index:
            self.commit_index = new_commit
            self._persist_meta(flush=False)
        # Entries are durable in the ring before this single ack leaves.
        self.node.endpoint.send(msg.src, self.log_id, AppendResp(
            self.log_id, self.node.addr, self.current_term, True,
            self.last_index, self.last_index, busy=busy))
        self.apply_committed(now)

    def _nack(self, dst: int, hint: int) -> None:
        self.node.endpoint.send(dst, self.log_id, AppendResp(
            self.log_id, self.node.addr, self.current_term, False, 0, max(hint, 0)))

    def on_append_resp(self, msg: AppendResp, now: int) -> None:
        if msg.term > self.current_term:
            self.become_follower(msg.term, now)
            return
        if self.role != LEADER or msg.term < self.current_term:
            return  # stale view; rejected outright
        if msg.success:
            if msg.match_index > self.match_index.get(msg.src, 0):
                self.match_index[msg.src] = msg.match_index
            if not msg.busy:
                self.next_index[msg.src] = max(
                    self.next_index.get(msg.src, 1), msg.match_index + 1)
            self.advance_commit(now)
            if self.next_index.get(msg.src, 1) <= self.last_index and not msg.busy:
                self._send_entries(msg.src, now)
        else:
            self.next_index[msg.src] = max(1, min(
                self.next_index.get(msg.src, 2) - 1, msg.hint_index + 1))
            self._send_entries(msg.src, now)

    def advance_commit(self, now: int) -> None:
        if self.role != LEADER:
            return
        matches = sorted(
            [self.last_index] + [self.match_index.get(p, 0) for p in self.peers],
            reverse=True)
        candidate = matches[self.cfg.quorum - 1]
        if candidate > self.commit_index and self.term_at(candidate) == self.current_term:
            self.commit_index = candidate
            self._persist_meta(flush=False)
            self.apply_committed(now)

    def on_vote_req(self, msg: VoteReq, now: int) -> None:
        if msg.term > self.current_term:
            self.become_follower(msg.term, now)
        granted = False
        if msg.term == self.current_term and self.voted_for in (-1, msg.src):
            up_to_date = (msg.last_term, msg.last_index) >= (self.last_term, self.last_index)
            if up_to_date:
                granted = True
                self.voted_for = msg.src
                self._persist_meta(flush=True)  # vote durable before response
                self.reset_election_timer(now)
        self.node.endpoint.send(msg.src, self.log_id, VoteResp(
            self.log_id, self.node.addr, self.current_term, granted))

    def on_vote_resp(self, msg: VoteResp, now: int) -> None:
        if msg.term > self.current_term:
            self.become_follower(msg.term, now)
            return
        if self.role != CANDIDATE or msg.term != self.current_term or not msg.granted:
            return
        self.votes.add(msg.src)
        self._maybe_win(now)

    # ------------------------------------------------------------------- apply

    def apply_committed(self, now: int) -> None:
        """Apply entries up to commit in order; ganged entries may park the
        loop until their barrier resolves."""
        self.apply_blocked = False
        while self.last_applied < self.commit_index:
            index = self.last_applied + 1
            rec = self.entry_at(index)
            if rec is None:
                break  # below the ring (already applied before restart)
            blob = decode_blob(self.region.payload(rec))
            self.node.observe_apply_term(self.log_id, blob.term)
            if blob.kind == KIND_BATCH:
                self._apply_batch(rec, blob)
            elif blob.kind != KIND_NOOP:
                if not self.node.gang_reached(self, rec, blob, now):
                    self.apply_blocked = True
                    return
            self.last_applied = index
        self.node.on_apply_progress(self, now)

    def _apply_batch(self, rec, blob) -> None:
        addrs = self.responders.pop(rec.index, None) if self.role == LEADER else None
        kv = self.node.kv
        for i, frame in enumerate(blob.frames):
            req = decode_request(frame)
            status, value = kv.apply_op(self.log_id, req.op, req.key, req.value)
            if addrs is not None and i < len(addrs):
                self.node.client_respond(addrs[i], ClientResp(
                    self.log_id, self.node.addr, self.current_term,
                    req.req_id, status, self.node.addr, bytes(value)))

    # -------------------------------------------------------------------- poll

    def poll(self, now: int) -> int | None:
        msgs = self.node.endpoint.recv_batch(self.log_id, self.cfg.batch_max)
        if msgs:
            self.node.clock.charge(self.cfg.sim.per_recv_us * len(msgs))
        client_reqs: list = []
        for msg in msgs:
            t = msg.mtype
            if t == MsgType.CLIENT_REQ:
                op = msg.payload.view[8]
                if op in (Op.PUT, Op.GET, Op.DELETE):
                    client_reqs.append(msg)
                else:
                    self.node.handle_service_request(self, msg, now)
            elif t == MsgType.APPEND:
                self.on_append(msg, now)
            elif t == MsgType.APPEND_RESP:
                self.on_append_resp(msg, now)
            elif t == MsgType.VOTE_REQ:
                self.on_vote_req(msg, now)
            elif t == MsgType.VOTE_RESP:
                self.on_vote_resp(msg, now)
            elif t == MsgType.NUDGE:
                self.node.on_nudge(self, msg, now)
            elif t == MsgType.CAMPAIGN:
                if self.role != LEADER:
                    self.start_election(now)
        if client_reqs:
            self.handle_client_batch(client_reqs, now)
        self.tick(now)
        if self.apply_blocked:
            self.apply_committed(now)
        return self.next_deadline(now)

    def tick(self, now: int) -> None:
        if self.role == LEADER:
            if now >= self.heartbeat_due:
                self.heartbeat_due = now + self.cfg.timing.heartbeat_us
                for peer in self.peers:
                    if self.next_index.get(peer, 1) <= self.last_index:
                        self._send_entries(peer, now)
                    else:
                        self._send_heartbeat(peer)
        elif now >= self.election_deadline:
            self.start_election(now)
        if self.drain is not None:
            self.drain.tick(self, now)
        self.node.instance_tick(self, now)

    def next_deadline(self, now: int) -> int:
        if self.role == LEADER:
            deadline = self.heartbeat_due
        else:
            deadline = self.election_deadline
        if self.drain is not None:
            d = self.drain.next_deadline()
            if d is not None:
                deadline = min(deadline, d)
        d = self.node.instance_deadline(self)
        if d is not None:
            deadline = min(deadline, d)
        return max(deadline, now + 1)
