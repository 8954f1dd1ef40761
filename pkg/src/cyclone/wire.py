"""Wire taxonomy: request frames, log entry blobs, and replica messages.

Three layers share these layouts (all little-endian, fixed field order,
documented in docs/wire.md):

* client request/response frames — what a client puts in a packet payload;
* entry blobs — a consensus term/index header prepended to one batch of
  request frames; this exact byte string is what gets persisted to the
  NVM arena, multicast to followers, and later drained to the flashlog;
* replica messages — AppendEntries and friends. Inside one process these
  travel as objects carrying buffer references (never copying payload
  bytes); the byte codecs at the bottom exist for the UDP backend.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum


class MsgType(IntEnum):
    CLIENT_REQ = 1
    CLIENT_RESP = 2
    APPEND = 3
    APPEND_RESP = 4
    VOTE_REQ = 5
    VOTE_RESP = 6
    NUDGE = 7
    CAMPAIGN = 8


class Op(IntEnum):
    PUT = 1
    GET = 2          # quorum read, logged through consensus
    DELETE = 3
    WEAK_GET = 4     # single round trip, session-term guarded
    GANG = 5         # atomic cross-log batch
    SNAPSHOT = 6     # atomic no-op to all keys


class Status(IntEnum):
    OK = 0
    NOT_FOUND = 1
    NOT_LEADER = 2
    STALE_LEADER = 3
    LOG_FULL = 4
    NOT_COLOCATED = 5
    RETRY_GANG = 6
    BUSY = 7
    ERROR = 8


# Entry blob kinds.
KIND_BATCH = 0
KIND_NOOP = 1
KIND_GANG = 2
KIND_SNAP = 3

MAX_KEY = 4096
MAX_VALUE = 1 << 20
NONCE_LEN = 14

# ---------------------------------------------------------------------------
# request frames

_REQ_HDR = struct.Struct("<QBQHI")  # req_id, op, session_term, key_len, val_len


def encode_request(req_id: int, op: int, key: bytes = b"", value: bytes = b"",
                   session_term: int = 0) -> bytes:
    if len(key) > MAX_KEY or len(value) > MAX_VALUE:
        raise ValueError("key or value exceeds size bounds")
    return _REQ_HDR.pack(req_id, op, session_term, len(key), len(value)) + key + value


def encode_section(ops: list[tuple[int, bytes, bytes]]) -> bytes:
    """One physical log's slice of a ganged batch: count-prefixed ops."""
    parts = [struct.pack("<H", len(ops))]
    for op, key, value in ops:
        parts.append(struct.pack("<BHI", op, len(key), len(value)))
        parts.append(key)
        parts.append(value)
    return b"".join(parts)


def decode_section(view) -> list[tuple[int, memoryview, memoryview]]:
    (nops,) = struct.unpack_from("<H", view, 0)
    pos = 2
    out = []
    for _ in range(nops):
        op, klen, vlen = struct.unpack_from("<BHI", view, pos)
        pos += 7
        key = view[pos : pos + klen]
        pos += klen
        value = view[pos : pos + vlen]
        pos += vlen
        out.append((op, key, value))
    return out


def encode_gang_request(req_id: int, sections: dict[int, bytes]) -> bytes:
    """Ganged batch frame: section table then per-log sections, contiguous
    so the dispatcher can hand each participant a zero-copy slice."""
    hdr = _REQ_HDR.pack(req_id, Op.GANG, 0, 0, 0)
    table = [struct.pack("<H", len(sections))]
    body = []
    for log_id in sorted(sections):
        sec = sections[log_id]
        table.append(struct.pack("<HI", log_id, len(sec)))
        body.append(sec)
    return hdr + b"".join(table) + b"".join(body)


@dataclass(slots=True)
class Request:
    req_id: int
    op: int
    session_term: int
    key: bytes
    value: bytes
    raw: object = None                       # full frame view (logged as-is)
    sections: dict = field(default_factory=dict)  # log_id -> memoryview


def decode_request(buf) -> Request:
    view = memoryview(buf)
    req_id, op, session_term, klen, vlen = _REQ_HDR.unpack_from(view, 0)
    pos = _REQ_HDR.size
    key = bytes(view[pos : pos + klen])
    pos += klen
    value = bytes(view[pos : pos + vlen])
    pos += vlen
    req = Request(req_id, op, session_term, key, value, raw=view)
    if op == Op.GANG:
        (nparts,) = struct.unpack_from("<H", view, pos)
        pos += 2
        table = []
        for _ in range(nparts):
            log_id, sec_len = struct.unpack_from("<HI", view, pos)
            pos += 6
            table.append((log_id, sec_len))
        for log_id, sec_len in table:
            req.sections[log_id] = view[pos : pos + sec_len]
            pos += sec_len
    return req


def peek_op(buf) -> int:
    """Operation type without parsing the frame (hot path)."""
    return buf[8]


# ---------------------------------------------------------------------------
# responses

_RESP_HDR = struct.Struct("<QBQhHI")  # req_id, status, term, leader_hint, log_id, val_len


@dataclass(slots=True)
class ClientResp:
    mtype = MsgType.CLIENT_RESP
    log_id: int
    src: int
    term: int
    req_id: int
    status: int
    leader_hint: int = -1
    value: bytes = b""

    def size(self) -> int:
        return 1 + _RESP_HDR.size + len(self.value)


# ---------------------------------------------------------------------------
# entry blobs

_BLOB_HDR = struct.Struct("<QQBH")  # term, index, kind, nreq
_GANG_HDR = struct.Struct("<H")     # participant count (after 14-byte nonce)
_PART = struct.Struct("<HQ")        # log_id, stamped term
_FRAME_LEN = struct.Struct("<I")


def blob_header(term: int, index: int, kind: int, nreq: int) -> bytes:
    return _BLOB_HDR.pack(term, index, kind, nreq)


def gang_extension(nonce: bytes, view_vector: list[tuple[int, int]]) -> bytes:
    assert len(nonce) == NONCE_LEN
    parts = [nonce, _GANG_HDR.pack(len(view_vector))]
    for log_id, term in view_vector:
        parts.append(_PART.pack(log_id, term))
    return b"".join(parts)


def frame_prefix(length: int) -> bytes:
    return _FRAME_LEN.pack(length)


@dataclass(slots=True)
class Blob:
    """Parsed view of one persisted entry."""

    term: int
    index: int
    kind: int
    nonce: bytes = b""
    view_vector: list = field(default_factory=list)
    frames: list = field(default_factory=list)   # request frames (memoryviews)
    section: object = None                       # gang mini-batch view


def decode_blob(buf) -> Blob:
    view = memoryview(buf)
    term, index, kind, nreq = _BLOB_HDR.unpack_from(view, 0)
    pos = _BLOB_HDR.size
    blob = Blob(term, index, kind)
    if kind in (KIND_GANG, KIND_SNAP):
        blob.nonce = bytes(view[pos : pos + NONCE_LEN])
        pos += NONCE_LEN
        (nparts,) = _GANG_HDR.unpack_from(view, pos)
        pos += _GANG_HDR.size
        for _ in range(nparts):
            log_id, pterm = _PART.unpack_from(view, pos)
            pos += _PART.size
            blob.view_vector.append((log_id, pterm))
        if kind == KIND_GANG:
            blob.section = view[pos:]
        return blob
    for _ in range(nreq):
        (flen,) = _FRAME_LEN.unpack_from(view, pos)
        pos += _FRAME_LEN.size
        blob.frames.append(view[pos : pos + flen])
        pos += flen
    return blob


# ---------------------------------------------------------------------------
# replica messages (object form)

@dataclass(slots=True)
class EntryMeta:
    term: int
    index: int
    length: int


@dataclass(slots=True)
class ClientReq:
    mtype = MsgType.CLIENT_REQ
    log_id: int
    src: int
    payload: object  # PayloadBuffer

    def size(self) -> int:
        return 1 + 4 + len(self.payload)


@dataclass(slots=True)
class Append:
    mtype = MsgType.APPEND
    log_id: int
    src: int
    term: int
    prev_index: int
    prev_term: int
    commit: int
    metas: list  # list[EntryMeta]
    chain: tuple  # tuple[PayloadBuffer, ...] aligned with metas

    def size(self) -> int:
        return 1 + 8 * 3 + 8 + 4 + 18 * len(self.metas) + sum(m.length for m in self.metas)


@dataclass(slots=True)
class AppendResp:
    mtype = MsgType.APPEND_RESP
    log_id: int
    src: int
    term: int
    success: bool
    match_index: int
    hint_index: int
    busy: bool = False

    def size(self) -> int:
        return 1 + 8 + 2 + 1 + 8 + 8 + 1


@dataclass(slots=True)
class VoteReq:
    mtype = MsgType.VOTE_REQ
    log_id: int
    src: int
    term: int
    last_index: int
    last_term: int

    def size(self) -> int:
        return 1 + 8 + 2 + 8 + 8


@dataclass(slots=True)
class VoteResp:
    mtype = MsgType.VOTE_RESP
    log_id: int
    src: int
    term: int
    granted: bool

    def size(self) -> int:
        return 1 + 8 + 2 + 1


@dataclass(slots=True)
class Nudge:
    """Ask the current leader of a log to hand leadership to target_node."""

    mtype = MsgType.NUDGE
    log_id: int
    src: int
    term: int
    target_node: int

    def size(self) -> int:
        return 1 + 8 + 2 + 2


@dataclass(slots=True)
class Campaign:
    """Targeted re-election hint: recipient should start a campaign now."""

    mtype = MsgType.CAMPAIGN
    log_id: int
    src: int
    term: int

    def size(self) -> int:
        return 1 + 8 + 2


# ---------------------------------------------------------------------------
# datagram codecs (UDP backend only; in-process transport passes objects)

_COMMON = struct.Struct("<BHi")  # msg_type, log_id, src


def encode_message(msg) -> bytes:
    head = _COMMON.pack(msg.mtype, msg.log_id, msg.src)
    t = msg.mtype
    if t == MsgType.CLIENT_REQ:
        return head + msg.payload.tobytes_raw()
    if t == MsgType.CLIENT_RESP:
        return head + _RESP_HDR.pack(msg.req_id, msg.status, msg.term,
                                     msg.leader_hint, msg.log_id, len(msg.value)) + msg.value
    if t == MsgType.APPEND:
        parts = [head, struct.pack("<QQQQH", msg.term, msg.prev_index, msg.prev_term,
                                   msg.commit, len(msg.metas))]
        for meta, buf in zip(msg.metas, msg.chain):
            parts.append(struct.pack("<QQI", meta.term, meta.index, meta.length))
            parts.append(buf.tobytes_raw())
        return b"".join(parts)
    if t == MsgType.APPEND_RESP:
        return head + struct.pack("<QBQQB", msg.term, msg.success, msg.match_index,
                                  msg.hint_index, msg.busy)
    if t == MsgType.VOTE_REQ:
        return head + struct.pack("<QQQ", msg.term, msg.last_index, msg.last_term)
    if t == MsgType.VOTE_RESP:
        return head + struct.pack("<QB", msg.term, msg.granted)
    if t == MsgType.NUDGE:
        return head + struct.pack("<QH", msg.term, msg.target_node)
    if t == MsgType.CAMPAIGN:
        return head + struct.pack("<Q", msg.term)
    raise ValueError(f"unknown message type {t}")


def decode_message(data: bytes, make_buffer):
    """Decode a datagram; ``make_buffer`` wraps payload bytes for delivery."""
    mtype, log_id, src = _COMMON.unpack_from(data, 0)
    pos = _COMMON.size
    if mtype == MsgType.CLIENT_REQ:
        return ClientReq(log_id, src, make_buffer(data[pos:]))
    if mtype == MsgType.CLIENT_RESP:
        req_id, status, term, hint, rlog, vlen = _RESP_HDR.unpack_from(data, pos)
        pos += _RESP_HDR.size
        return ClientResp(rlog, src, term, req_id, status, hint, data[pos : pos + vlen])
    if mtype == MsgType.APPEND:
        term, prev_index, prev_term, commit, n = struct.unpack_from("<QQQQH", data, pos)
        pos += 34
        metas, chain = [], []
        for _ in range(n):
            eterm, eindex, elen = struct.unpack_from("<QQI", data, pos)
            pos += 20
            metas.append(EntryMeta(eterm, eindex, elen))
            chain.append(make_buffer(data[pos : pos + elen]))
            pos += elen
        return Append(log_id, src, term, prev_index, prev_term, commit, metas, tuple(chain))
    if mtype == MsgType.APPEND_RESP:
        term, success, match, hint, busy = struct.unpack_from("<QBQQB", data, pos)
        return AppendResp(log_id, src, term, bool(success), match, hint, bool(busy))
    if mtype == MsgType.VOTE_REQ:
        term, last_index, last_term = struct.unpack_from("<QQQ", data, pos)
        return VoteReq(log_id, src, term, last_index, last_term)
    if mtype == MsgType.VOTE_RESP:
        term, granted = struct.unpack_from("<QB", data, pos)
        return VoteResp(log_id, src, term, bool(granted))
    if mtype == MsgType.NUDGE:
        term, target = struct.unpack_from("<QH", data, pos)
        return Nudge(log_id, src, term, target)
    if mtype == MsgType.CAMPAIGN:
        (term,) = struct.unpack_from("<Q", data, pos)
        return Campaign(log_id, src, term)
    raise ValueError(f"unknown message type {mtype}")
