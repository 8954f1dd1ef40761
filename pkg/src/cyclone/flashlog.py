"""Second-level log on block storage, fed from the NVM ring in FIFO order.

Records are packed into 128 KiB segment buffers of 4 KiB pages. A record
header is 12 bytes (fragment size with a continuation flag, then the LSN);
a header+fragment never crosses a page boundary - records larger than the
space left in a page continue as a fragment chain with the flag set on all
but the last piece. A zero size field marks page-end padding, and a page
that is zero from its very first byte terminates recovery (the file tail
is preallocated zero-filled space).

Segments are written asynchronously with at most 32 outstanding writes.
The crash model matches the drive assumptions this format needs: a 4 KiB
page is applied atomically and in order within one write, so recovery
always returns a consistent prefix. An NVM slot is only released once the
covering segment write is durable, which is why the same LSN can appear in
both logs after a crash; the merge step deduplicates by LSN.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .errors import ExtendFailed, RecoverCorrupt, RecoverInvariantViolation, SegmentFull

REC_HDR = struct.Struct("<IQ")  # size_and_flags, lsn
REC_HDR_LEN = REC_HDR.size  # 12
CONT_FLAG = 1 << 31
SIZE_MASK = CONT_FLAG - 1


# ---------------------------------------------------------------------------
# placement

def place_record(buf: bytearray, fill: int, lsn: int, payload, page_size: int = 4096):
    """Pack one record into a segment buffer from ``fill`` onward.

    Returns (new_fill, placements) where each placement is
    (offset, fragment_size, continuation). Raises SegmentFull when the
    payload cannot finish inside this buffer.
    """
    if len(payload) == 0:
        raise ValueError("empty payload")
    placements = []
    pos = fill
    remaining = len(payload)
    consumed = 0
    seg_len = len(buf)
    while remaining:
        page_left = page_size - (pos % page_size)
        if page_left < REC_HDR_LEN + 1:
            # Implied page-end marker: zero fill reads as size 0.
            pos += page_left
            continue
        if pos + REC_HDR_LEN + 1 > seg_len:
            raise SegmentFull(f"record (lsn {lsn}) does not fit at offset {fill}")
        frag = min(remaining, page_left - REC_HDR_LEN, seg_len - pos - REC_HDR_LEN)
        cont = frag < remaining
        REC_HDR.pack_into(buf, pos, frag | (CONT_FLAG if cont else 0), lsn)
        buf[pos + REC_HDR_LEN : pos + REC_HDR_LEN + frag] = payload[consumed : consumed + frag]
        placements.append((pos, frag, cont))
        pos += REC_HDR_LEN + frag
        consumed += frag
        remaining -= frag
    return pos, placements


# ---------------------------------------------------------------------------
# backends

class RamFlash:
    """In-memory flash file with explicit submit/complete, so tests and the
    simulator control write completion timing (and crash points)."""

    def __init__(self, size: int):
        self.image = bytearray(size)
        self.length = size
        self._pending: dict[int, tuple[int, bytes]] = {}
        self._seq = 0

    def extend(self, new_length: int) -> None:
        if new_length <= self.length:
            return
        self.image.extend(b"\x00" * (new_length - self.length))
        self.length = new_length

    def submit(self, off: int, data: bytes) -> int:
        if off + len(data) > self.length:
            raise ExtendFailed("write beyond preallocated region")
        self._seq += 1
        self._pending[self._seq] = (off, bytes(data))
        return self._seq

    def complete(self, handle: int, page_size: int = 4096, pages: int | None = None) -> None:
        off, data = self._pending.pop(handle)
        end = len(data) if pages is None else min(len(data), pages * page_size)
        self.image[off : off + end] = data[:end]

    def read(self, off: int, n: int) -> bytes:
        return bytes(self.image[off : off + n])

    def snapshot(self) -> bytes:
        return bytes(self.image)

    def close(self) -> None:
        pass


class FileFlash:
    """Real file backend; writes complete synchronously."""

    def __init__(self, path: str, initial_size: int, durable: bool = True):
        import os

        self.path = path
        self.durable = durable
        exists = os.path.exists(path)
        self._fh = open(path, "r+b" if exists else "w+b")
        self.length = os.fstat(self._fh.fileno()).st_size
        if self.length < initial_size:
            self.extend(initial_size)

    def extend(self, new_length: int) -> None:
        try:
            self._fh.seek(0, 2)
            here = self._fh.tell()
            while here < new_length:
                chunk = min(1 << 20, new_length - here)
                self._fh.write(b"\x00" * chunk)
                here += chunk
            self._fh.flush()
            if self.durable:
                import os

                os.fsync(self._fh.fileno())
            self.length = new_length
        except OSError as exc:
            raise ExtendFailed(str(exc)) from exc

    def submit(self, off: int, data: bytes) -> int:
        self._fh.seek(off)
        self._fh.write(data)
        self._fh.flush()
        if self.durable:
            import os

            os.fsync(self._fh.fileno())
        return 0

    def complete(self, handle: int, page_size: int = 4096, pages: int | None = None) -> None:
        pass  # durable at submit

    def read(self, off: int, n: int) -> bytes:
        self._fh.seek(off)
        return self._fh.read(n)

    def close(self) -> None:
        self._fh.close()


# ---------------------------------------------------------------------------
# drain engine

@dataclass(slots=True)
class _Submission:
    seq: int
    handle: int
    done_at: int
    upto_lsn: int
    completed: bool = False


class DrainEngine:
    """Moves applied entries from one NVM ring into its flashlog.

    FIFO in LSN order; the NVM slot is truncated only once the covering
    segment write is durable *and* every earlier submission is too, so the
    two logs always overlap or abut at the seam.
    """

    def __init__(self, region, backend, cfg, sync: bool = False):
        self.region = region
        self.backend = backend
        self.storage = cfg.storage
        self.latency_us = int(cfg.sim.flash_write_latency_us)
        self.sync = sync  # complete submissions immediately (file backend)
        self.seg = bytearray(self.storage.segment_size)
        self.seg_base = 0          # file offset of the current segment
        self.fill = 0
        self.seg_last_lsn = -1
        self.seg_dirty = False     # placed bytes not yet covered by a submission
        self.placed_upto = -1      # highest LSN placed into any buffer
        self.durable_upto = -1     # highest LSN safely on flash (contiguous)
        self.subs: list[_Submission] = []
        self._seq = 0
        self.max_outstanding_seen = 0
        self.drained_total = 0

    # -- eligibility -------------------------------------------------------

    def _eligible_upto(self, instance) -> int:
        """Drain applied entries, keeping a catch-up window in the ring
        unless pressure forces movement."""
        applied_lsn = instance.last_applied - 1  # lsn tracks index - 1
        retain = self.storage.drain_retain_slots
        if self.region.free_slots() < max(2, self.region.ring_capacity // 16):
            return applied_lsn  # ring pressure: retain nothing
        return applied_lsn - retain

    def tick(self, instance, now: int) -> tuple[int, int]:
        """One drain step; returns the (first, last) LSN range placed."""
        self.pump(now)
        first = last = -1
        upto = self._eligible_upto(instance)
        if upto > self.placed_upto:
            for rec in self.region.entries:
                if rec.lsn <= self.placed_upto:
                    continue
                if rec.lsn > upto:
                    break
                if not self._place(rec, now):
                    break  # outstanding limit hit; retry next tick
                if first < 0:
                    first = rec.lsn
                last = rec.lsn
        ring_used = len(self.region.entries) / max(1, self.region.ring_capacity)
        if self.seg_dirty and ring_used >= self.storage.drain_threshold:
            self._submit_segment(now, rotate=False)
        self.pump(now)
        return (first, last)

    def _place(self, rec, now: int) -> bool:
        payload = self.region.payload_bytes(rec)
        while True:
            try:
                self.fill, _ = place_record(
                    self.seg, self.fill, rec.lsn, payload, self.storage.page_size)
                break
            except SegmentFull:
                if not self._submit_segment(now, rotate=True):
                    return False
        self.seg_last_lsn = rec.lsn
        self.placed_upto = rec.lsn
        self.seg_dirty = True
        if self.fill >= len(self.seg):
            self._submit_segment(now, rotate=True)
        return True

    def _submit_segment(self, now: int, rotate: bool) -> bool:
        outstanding = sum(1 for s in self.subs if not s.completed)
        if outstanding >= self.storage.max_outstanding_writes:
            return False
        if self.seg_dirty and self.seg_last_lsn >= 0:
            end = self.seg_base + self.storage.segment_size
            if end > self.backend.length:
                self.preallocate_extend()
            self._seq += 1
            # Whole-segment writes keep every page's content monotone and
            # scrub any pre-crash garbage past the resume point.
            data = bytes(self.seg)
            handle = self.backend.submit(self.seg_base, data)
            sub = _Submission(self._seq, handle, now + self.latency_us, self.seg_last_lsn)
            self.subs.append(sub)
            outstanding += 1
            if outstanding > self.max_outstanding_seen:
                self.max_outstanding_seen = outstanding
            if self.sync:
                self.backend.complete(handle)
                sub.completed = True
            self.seg_dirty = False
        if rotate:
            self.seg_base += self.storage.segment_size
            self.seg = bytearray(self.storage.segment_size)
            self.fill = 0
            self.seg_last_lsn = -1
            self.seg_dirty = False
        return True

    def flush(self, now: int) -> None:
        """Force the current partial segment out (shutdown, tests)."""
        if self.seg_dirty:
            self._submit_segment(now, rotate=False)

    def restore(self, scan_end: int, durable_upto: int) -> None:
        """Resume after recovery: refill the partial segment buffer from
        the durable image and continue from the last accepted record."""
        seg_size = self.storage.segment_size
        self.seg_base = (scan_end // seg_size) * seg_size
        self.fill = scan_end - self.seg_base
        raw = self.backend.read(self.seg_base, min(self.fill, seg_size))
        self.seg = bytearray(seg_size)
        self.seg[: len(raw)] = raw
        self.placed_upto = durable_upto
        self.durable_upto = durable_upto
        self.seg_last_lsn = -1
        self.seg_dirty = False

    def preallocate_extend(self) -> int:
        """Extend the file with explicit zero fill; durable before any
        segment lands in the new region."""
        self.backend.extend(self.backend.length + self.storage.flash_prealloc_chunk)
        return self.backend.length

    def pump(self, now: int) -> None:
        """Complete due writes and truncate the NVM ring up to the
        contiguous durable watermark."""
        for sub in self.subs:
            if not sub.completed and sub.done_at <= now:
                self.backend.complete(sub.handle)
                sub.completed = True
        while self.subs and self.subs[0].completed:
            self.durable_upto = max(self.durable_upto, self.subs[0].upto_lsn)
            self.subs.pop(0)
        head = self.region.head_lsn
        if head is not None and head <= self.durable_upto:
            self.drained_total += self.region.truncate_front(self.durable_upto)

    def next_deadline(self) -> int | None:
        pending = [s.done_at for s in self.subs if not s.completed]
        return min(pending) if pending else None

    def outstanding(self) -> int:
        return sum(1 for s in self.subs if not s.completed)


# ---------------------------------------------------------------------------
# recovery

def recover_scan(backend, page_size: int = 4096, strict: bool = True):
    """Scan a flashlog image; returns (entries, scan_end).

    ``entries`` is an LSN-ascending list of (lsn, payload bytes);
    ``scan_end`` is the offset just past the last accepted record, where a
    restarted drain resumes filling. A broken fragment chain at the tail
    truncates to the last complete record; a broken chain with complete
    records after it raises RecoverCorrupt (interior damage the format
    cannot produce).
    """
    out: list[tuple[int, bytes]] = []
    chain_lsn = -1
    chain_start = 0
    chain_parts: list[bytes] = []
    first_incomplete: int | None = None
    accept_end = 0

    size = backend.length
    pos = 0
    while pos < size:
        page_left = page_size - (pos % page_size)
        if page_left < REC_HDR_LEN + 1:
            pos += page_left
            continue
        size_flags, lsn = REC_HDR.unpack_from(_read(backend, pos, REC_HDR_LEN), 0)
        if size_flags == 0:
            page_start = pos - (pos % page_size)
            if pos == page_start:
                rest = _read(backend, page_start, page_size)
                if rest.count(0) == len(rest):
                    break  # fully-zero page: end of log
            pos = page_start + page_size  # padding: skip to next page
            continue
        frag = size_flags & SIZE_MASK
        cont = bool(size_flags & CONT_FLAG)
        if REC_HDR_LEN + frag > page_left:
            raise RecoverCorrupt(f"fragment at {pos} crosses a page boundary")
        data = _read(backend, pos + REC_HDR_LEN, frag)
        if not chain_parts:
            chain_lsn = lsn
            chain_start = pos
        elif lsn != chain_lsn:
            # Previous chain never finished: legal only at the tail.
            if first_incomplete is None:
                first_incomplete = chain_start
            chain_lsn = lsn
            chain_start = pos
            chain_parts = []
        pos += REC_HDR_LEN + frag
        chain_parts.append(data)
        if not cont:
            if first_incomplete is not None and strict:
                raise RecoverCorrupt("incomplete fragment chain in the interior")
            out.append((chain_lsn, b"".join(chain_parts)))
            accept_end = pos
            chain_parts = []
    if chain_parts and first_incomplete is None:
        first_incomplete = chain_start
    if first_incomplete is not None:
        accept_end = min(accept_end, first_incomplete) if out else first_incomplete
    for a, b in zip(out, out[1:]):
        if b[0] != a[0] + 1:
            raise RecoverCorrupt(f"LSNs not contiguous at {a[0]} -> {b[0]}")
    return out, accept_end


def flashlog_recover(backend, page_size: int = 4096, strict: bool = True):
    """Recovered (lsn, payload) list; see recover_scan."""
    return recover_scan(backend, page_size, strict)[0]


def _read(backend, off: int, n: int) -> bytes:
    return backend.read(off, n)


def merge_recover(region, flash_entries):
    """Stitch the recovered NVM suffix onto the flashlog prefix.

    Entries present in both (drained but not yet truncated at the crash)
    are taken once, by LSN. A seam gap is impossible under the drain
    protocol and raises RecoverInvariantViolation.
    """
    flash_max = flash_entries[-1][0] if flash_entries else -1
    nvm_min = region.head_lsn
    if nvm_min is None:
        unified = list(flash_entries)
    else:
        if flash_max + 1 < nvm_min:
            raise RecoverInvariantViolation(
                f"gap between flashlog (max lsn {flash_max}) and NVM (min lsn {nvm_min})")
        unified = list(flash_entries)
        for rec in region.entries:
            if rec.lsn > flash_max:
                unified.append((rec.lsn, region.payload_bytes(rec)))
    for a, b in zip(unified, unified[1:]):
        if b[0] != a[0] + 1:
            raise RecoverInvariantViolation(f"merged LSNs not contiguous at {a[0]}")
    if unified and flash_entries and unified[0][0] != flash_entries[0][0]:
        raise RecoverInvariantViolation("merged log does not start at the flash head")
    return unified
