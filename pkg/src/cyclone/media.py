"""Byte-addressable persistent regions with explicit ordering barriers.

The NVM emulation needs exactly one ordering primitive: ``persist(off, n)``
guarantees that all writes issued to the region so far are durable before
any write issued afterwards. Real hardware would use cacheline flushes and
fences; here a region is either an mmap'ed file (durable via msync) or an
in-memory buffer used by the simulator.

``RamMedia`` can additionally record its write stream so tests can fork a
"crashed" durable image at any point: after any whole write, or torn at any
byte offset inside one. Writes are modelled as reaching durability in issue
order, which is the contract the slot-seal format is designed for (a torn
final write is detectable, a reordered interior one is not emulated).
"""
from __future__ import annotations

import mmap
import os

from .errors import OpenSizeMismatch


class RamMedia:
    """In-memory region; optionally journals writes for crash forking."""

    def __init__(self, capacity: int, image: bytes = b"", record: bool = False):
        if image and len(image) != capacity:
            raise OpenSizeMismatch(f"image is {len(image)} bytes, want {capacity}")
        self.capacity = capacity
        self.buf = bytearray(image) if image else bytearray(capacity)
        self.record = record
        self.writes: list[tuple[int, bytes]] = []
        self.barriers: list[int] = []  # write counts at each persist()
        self.persist_count = 0
        self._crash_after: int | None = None  # (write index) to stop at
        self._crash_partial = 0  # bytes of that write to apply

    def write(self, off: int, data: bytes) -> None:
        if off < 0 or off + len(data) > self.capacity:
            raise ValueError("write outside region")
        if self.record:
            if self._crash_after is not None and len(self.writes) == self._crash_after:
                self.buf[off : off + self._crash_partial] = data[: self._crash_partial]
                raise CrashPoint()
            self.writes.append((off, bytes(data)))
        self.buf[off : off + len(data)] = data

    def read(self, off: int, n: int) -> bytes:
        return bytes(self.buf[off : off + n])

    def view(self, off: int, n: int) -> memoryview:
        return memoryview(self.buf)[off : off + n]

    def persist(self, off: int = 0, n: int = 0) -> None:
        self.persist_count += 1
        if self.record:
            self.barriers.append(len(self.writes))

    def snapshot(self) -> bytes:
        return bytes(self.buf)

    def crash_image(self, nwrites: int, partial: int = 0) -> bytes:
        """Durable image had the process died mid-stream.

        The image reflects the first ``nwrites`` writes, plus the first
        ``partial`` bytes of the following one.
        """
        img = bytearray(self.capacity)
        for off, data in self.writes[:nwrites]:
            img[off : off + len(data)] = data
        if partial and nwrites < len(self.writes):
            off, data = self.writes[nwrites]
            img[off : off + partial] = data[:partial]
        return bytes(img)

    def arm_crash(self, nwrites: int, partial: int = 0) -> None:
        """Raise CrashPoint once the write stream reaches the given point."""
        self._crash_after = nwrites
        self._crash_partial = partial

    def close(self) -> None:
        pass


class CrashPoint(Exception):
    """Raised by an armed RamMedia when the injected crash point is hit."""


class FileMedia:
    """mmap-backed region for real deployments; persist() is msync."""

    def __init__(self, path: str, capacity: int, durable: bool = True):
        create = not os.path.exists(path)
        mode = "w+b" if create else "r+b"
        self._fh = open(path, mode)
        if create:
            self._fh.truncate(capacity)
        else:
            actual = os.fstat(self._fh.fileno()).st_size
            if actual != capacity:
                self._fh.close()
                raise OpenSizeMismatch(f"{path} is {actual} bytes, want {capacity}")
        self.capacity = capacity
        self.durable = durable
        self.created = create
        self._mm = mmap.mmap(self._fh.fileno(), capacity)

    def write(self, off: int, data: bytes) -> None:
        self._mm[off : off + len(data)] = data

    def read(self, off: int, n: int) -> bytes:
        return self._mm[off : off + n]

    def view(self, off: int, n: int) -> memoryview:
        return memoryview(self._mm)[off : off + n]

    def persist(self, off: int = 0, n: int = 0) -> None:
        if not self.durable:
            return
        if n == 0:
            self._mm.flush()
            return
        page = mmap.PAGESIZE
        start = (off // page) * page
        length = off + n - start
        length = ((length + page - 1) // page) * page
        length = min(length, self.capacity - start)
        self._mm.flush(start, length)

    def close(self) -> None:
        self._mm.flush()
        self._mm.close()
        self._fh.close()
