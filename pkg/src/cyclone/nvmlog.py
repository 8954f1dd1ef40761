"""Top-level persistent log emulating byte-addressable NVM.

Layout (little-endian, documented in docs/formats.md):

    [0..24)    header: magic u64, version u32, ring_capacity u32, arena_offset u64
    [24..104)  consensus metadata, two 40-byte ping-pong slots
    [128..)    ring of 40-byte pointer slots
    [arena..)  payload arena

The log itself is a circular array of fixed-size pointer slots indexing
payload buffers in the arena. A slot write happens payload-first,
slot-record-last, with an ordering barrier between; the slot record carries
a CRC over its other fields ("seal") written as its final bytes, so a torn
slot write verifies as absent and recovery always yields a prefix.

LSNs rise strictly along the ring. Removing a conflicting suffix rewinds
the LSN counter so ring LSNs stay contiguous; rewound LSNs can never have
reached the flashlog (only committed entries drain), so LSN-based
deduplication at recovery stays sound.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

from .errors import (
    EntryTooLarge,
    LogFull,
    OpenCorrupt,
    OpenSizeMismatch,
    TruncateBeforeHead,
    TruncateBeyondTail,
)
from .media import FileMedia, RamMedia

MAGIC = 0x4359434C4F4E4531
VERSION = 1

HEADER_FMT = "<QIIQ"
HEADER_SIZE = struct.calcsize(HEADER_FMT)  # 24

META_FMT = "<QQqQI4x"
META_SIZE = struct.calcsize(META_FMT)  # 40
META_OFFSETS = (24, 64)

RING_OFFSET = 128

SLOT_FMT = "<QIQQQ"  # offset, length, lsn, term, index; CRC32 appended
SLOT_BODY = struct.calcsize(SLOT_FMT)  # 36
SLOT_SIZE = SLOT_BODY + 4  # 40

ALLOC_ALIGN = 64


def _seal(body: bytes) -> int:
    return zlib.crc32(body)


@dataclass(slots=True)
class EntryRec:
    """In-memory mirror of one live pointer slot."""

    pos: int
    lsn: int
    term: int
    index: int
    offset: int
    length: int


@dataclass(slots=True)
class ConsensusMeta:
    seq: int = 0
    term: int = 0
    voted_for: int = -1
    commit_index: int = 0


class BufferPool:
    """First-fit allocator over the arena with transport pinning.

    The free list is rebuilt from live slots at recovery; refcounts are
    volatile. A buffer freed while the transport still holds a reference
    is parked and returned to the free list on the final release.
    """

    def __init__(self, start: int, end: int):
        self.start = start
        self.end = end
        self.free: list[list[int]] = [[start, end]]  # sorted [lo, hi) pairs
        self.pins: dict[int, int] = {}
        self.parked: dict[int, int] = {}  # offset -> size, freed but pinned

    def alloc(self, size: int) -> int | None:
        size = self._round(size)
        for rng in self.free:
            lo, hi = rng
            if hi - lo >= size:
                rng[0] = lo + size
                if rng[0] == rng[1]:
                    self.free.remove(rng)
                return lo
        return None

    def free_range(self, off: int, size: int) -> None:
        size = self._round(size)
        if self.pins.get(off):
            self.parked[off] = size
            return
        self._insert(off, size)

    def pin(self, off: int) -> None:
        self.pins[off] = self.pins.get(off, 0) + 1

    def release(self, off: int) -> None:
        n = self.pins.get(off, 0) - 1
        if n > 0:
            self.pins[off] = n
            return
        self.pins.pop(off, None)
        size = self.parked.pop(off, None)
        if size is not None:
            self._insert(off, size)

    def free_bytes(self) -> int:
        return sum(hi - lo for lo, hi in self.free)

    def _insert(self, off: int, size: int) -> None:
        lo, hi = off, off + size
        out: list[list[int]] = []
        placed = False
        for rng in self.free:
            if rng[1] < lo:
                out.append(rng)
            elif hi < rng[0]:
                if not placed:
                    out.append([lo, hi])
                    placed = True
                out.append(rng)
            else:  # adjacent or overlapping: coalesce
                lo = min(lo, rng[0])
                hi = max(hi, rng[1])
        if not placed:
            out.append([lo, hi])
            out.sort()
        self.free = out

    @staticmethod
    def _round(size: int) -> int:
        return max(ALLOC_ALIGN, (size + ALLOC_ALIGN - 1) // ALLOC_ALIGN * ALLOC_ALIGN)


class NvmRegion:
    """One physical log's NVM region: pointer ring + payload arena."""

    def __init__(self, media, ring_capacity: int, max_entry_size: int = 9000):
        self.media = media
        self.ring_capacity = ring_capacity
        self.max_entry_size = max_entry_size
        self.arena_offset = self._arena_offset(ring_capacity)
        if self.arena_offset + ALLOC_ALIGN > media.capacity:
            raise OpenSizeMismatch("region too small for ring")
        self.pool = BufferPool(self.arena_offset, media.capacity)
        self.entries: list[EntryRec] = []  # head..tail order
        self.head_pos = 0  # next slot to write
        self.next_lsn = 0
        self.meta = ConsensusMeta()
        self._meta_toggle = 0

    # -- construction ----------------------------------------------------

    @classmethod
    def create(cls, media, ring_capacity: int, max_entry_size: int = 9000) -> "NvmRegion":
        region = cls(media, ring_capacity, max_entry_size)
        hdr = struct.pack(HEADER_FMT, MAGIC, VERSION, ring_capacity, region.arena_offset)
        media.write(0, hdr)
        media.persist(0, HEADER_SIZE)
        region._write_meta(flush=True)
        return region

    @classmethod
    def recover(cls, media, max_entry_size: int = 9000) -> "NvmRegion":
        hdr = media.read(0, HEADER_SIZE)
        magic, version, ring_capacity, arena_offset = struct.unpack(HEADER_FMT, hdr)
        if magic != MAGIC or version != VERSION:
            raise OpenCorrupt(f"bad header magic/version ({magic:#x} v{version})")
        region = cls(media, ring_capacity, max_entry_size)
        if arena_offset != region.arena_offset:
            raise OpenCorrupt("header arena offset inconsistent with ring capacity")
        region._recover_meta()
        region._recover_ring()
        return region

    @staticmethod
    def _arena_offset(ring_capacity: int) -> int:
        raw = RING_OFFSET + ring_capacity * SLOT_SIZE
        return (raw + ALLOC_ALIGN - 1) // ALLOC_ALIGN * ALLOC_ALIGN

    # -- append / truncate -----------------------------------------------

    def append(self, term: int, index: int, chunks, total_len: int) -> int:
        """Persist one entry; returns its LSN.

        ``chunks`` is an iterable of bytes-like pieces written back to back
        into one arena buffer (the chained-packets batch shape). The
        payload is durable before the slot record is written.
        """
        if total_len > self.max_entry_size:
            raise EntryTooLarge(f"{total_len} > {self.max_entry_size}")
        if len(self.entries) >= self.ring_capacity:
            raise LogFull("pointer ring full")
        off = self.pool.alloc(total_len)
        if off is None:
            raise LogFull("payload arena full")
        pos = off
        for chunk in chunks:
            self.media.write(pos, bytes(chunk))
            pos += len(chunk)
        assert pos - off == total_len, "chunk lengths disagree with total_len"
        self.media.persist(off, total_len)

        slot_pos = self.head_pos
        lsn = self.next_lsn
        body = struct.pack(SLOT_FMT, off, total_len, lsn, term, index)
        rec = body + struct.pack("<I", _seal(body))
        slot_off = RING_OFFSET + slot_pos * SLOT_SIZE
        self.media.write(slot_off, rec)
        self.media.persist(slot_off, SLOT_SIZE)

        self.entries.append(EntryRec(slot_pos, lsn, term, index, off, total_len))
        self.head_pos = (slot_pos + 1) % self.ring_capacity
        self.next_lsn = lsn + 1
        return lsn

    def truncate_front(self, upto_lsn: int) -> int:
        """Invalidate entries with lsn <= upto_lsn (drained to flashlog)."""
        if upto_lsn >= self.next_lsn:
            raise TruncateBeyondTail(f"lsn {upto_lsn} beyond tail {self.next_lsn - 1}")
        count = 0
        for rec in self.entries:
            if rec.lsn > upto_lsn:
                break
            count += 1
        if not count:
            return 0
        for rec in self.entries[:count]:
            self._zero_slot(rec.pos)
            self.pool.free_range(rec.offset, rec.length)
        self.entries = self.entries[count:]
        self.media.persist()
        return count

    def truncate_back(self, from_index: int) -> int:
        """Remove the suffix with RAFT index >= from_index (conflict)."""
        if self.entries and from_index < self.entries[0].index:
            raise TruncateBeforeHead(f"index {from_index} before head")
        keep = len(self.entries)
        while keep and self.entries[keep - 1].index >= from_index:
            keep -= 1
        removed = self.entries[keep:]
        if not removed:
            return 0
        # Zero tail-inward so a crash mid-way still leaves a contiguous run.
        for rec in reversed(removed):
            self._zero_slot(rec.pos)
        self.entries = self.entries[:keep]
        self.media.persist()
        for rec in removed:
            self.pool.free_range(rec.offset, rec.length)
        self.next_lsn = removed[0].lsn  # rewind: ring LSNs stay contiguous
        self.head_pos = removed[0].pos
        return len(removed)

    def _zero_slot(self, pos: int) -> None:
        self.media.write(RING_OFFSET + pos * SLOT_SIZE, b"\x00" * SLOT_SIZE)

    # -- payload access ---------------------------------------------------

    def payload(self, rec: EntryRec) -> memoryview:
        return self.media.view(rec.offset, rec.length)

    def payload_bytes(self, rec: EntryRec) -> bytes:
        return self.media.read(rec.offset, rec.length)

    # -- consensus metadata ------------------------------------------------

    def set_meta(self, term: int, voted_for: int, commit_index: int, flush: bool = True) -> None:
        """Persist term/vote/commit. Term or vote changes must flush; a
        commit-only update may ride on the next barrier (stale is safe)."""
        self.meta.term = term
        self.meta.voted_for = voted_for
        self.meta.commit_index = commit_index
        self._write_meta(flush=flush)

    def _write_meta(self, flush: bool) -> None:
        self.meta.seq += 1
        body = struct.pack(
            "<QQqQ", self.meta.seq, self.meta.term, self.meta.voted_for, self.meta.commit_index
        )
        rec = struct.pack(META_FMT, self.meta.seq, self.meta.term,
                          self.meta.voted_for, self.meta.commit_index, _seal(body))
        off = META_OFFSETS[self._meta_toggle]
        self._meta_toggle ^= 1
        self.media.write(off, rec)
        if flush:
            self.media.persist(off, META_SIZE)

    def _recover_meta(self) -> None:
        best: ConsensusMeta | None = None
        for off in META_OFFSETS:
            raw = self.media.read(off, META_SIZE)
            seq, term, voted, commit, crc = struct.unpack("<QQqQI4x", raw)
            if crc != _seal(struct.pack("<QQqQ", seq, term, voted, commit)):
                continue
            if best is None or seq > best.seq:
                best = ConsensusMeta(seq, term, voted, commit)
        if best is None:
            raise OpenCorrupt("both consensus metadata slots invalid")
        self.meta = best
        self._meta_toggle = 0

    # -- recovery -----------------------------------------------------------

    def _recover_ring(self) -> None:
        valid: dict[int, EntryRec] = {}
        for pos in range(self.ring_capacity):
            off = RING_OFFSET + pos * SLOT_SIZE
            raw = self.media.read(off, SLOT_SIZE)
            body, crc = raw[:SLOT_BODY], struct.unpack("<I", raw[SLOT_BODY:])[0]
            if crc != _seal(body):
                continue
            boff, length, lsn, term, index = struct.unpack(SLOT_FMT, body)
            if boff == 0:
                continue
            valid[pos] = EntryRec(pos, lsn, term, index, boff, length)
        if not valid:
            self.entries = []
            self.head_pos = 0
            self.next_lsn = 0
            return
        if len(valid) == self.ring_capacity:
            start = min(valid, key=lambda p: valid[p].lsn)
        else:
            starts = [p for p in valid if (p - 1) % self.ring_capacity not in valid]
            if len(starts) != 1:
                raise OpenCorrupt("live slots do not form one contiguous run")
            start = starts[0]
        run: list[EntryRec] = []
        pos = start
        while pos in valid:
            run.append(valid[pos])
            pos = (pos + 1) % self.ring_capacity
            if pos == start:
                break
        if len(run) != len(valid):
            raise OpenCorrupt("live slots do not form one contiguous run")
        for a, b in zip(run, run[1:]):
            if b.lsn <= a.lsn:
                raise OpenCorrupt("ring LSNs not strictly increasing")
        self.entries = run
        self.head_pos = (run[-1].pos + 1) % self.ring_capacity
        self.next_lsn = run[-1].lsn + 1
        for rec in run:
            size = BufferPool._round(rec.length)
            self._carve(rec.offset, size)

    def _carve(self, off: int, size: int) -> None:
        """Remove [off, off+size) from the free list during recovery."""
        for rng in list(self.pool.free):
            lo, hi = rng
            if off >= lo and off + size <= hi:
                self.pool.free.remove(rng)
                if lo < off:
                    self.pool.free.append([lo, off])
                if off + size < hi:
                    self.pool.free.append([off + size, hi])
                self.pool.free.sort()
                return
        raise OpenCorrupt("slot payloads overlap or escape the arena")

    # -- introspection ------------------------------------------------------

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def head_lsn(self) -> int | None:
        return self.entries[0].lsn if self.entries else None

    @property
    def tail_lsn(self) -> int | None:
        return self.entries[-1].lsn if self.entries else None

    def free_slots(self) -> int:
        return self.ring_capacity - len(self.entries)

    def close(self) -> None:
        self.media.close()


def nvm_open(path: str, capacity: int, ring_capacity: int = 4096,
             max_entry_size: int = 9000, durable: bool = True) -> NvmRegion:
    """Open a file-backed region: create if absent, otherwise recover."""
    media = FileMedia(path, capacity, durable=durable)
    if media.created:
        return NvmRegion.create(media, ring_capacity, max_entry_size)
    return NvmRegion.recover(media, max_entry_size)


def ram_region(capacity: int, ring_capacity: int, max_entry_size: int = 9000,
               record: bool = False) -> NvmRegion:
    return NvmRegion.create(RamMedia(capacity, record=record), ring_capacity, max_entry_size)
