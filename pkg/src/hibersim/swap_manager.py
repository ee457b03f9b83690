"""Swap-out/swap-in for a paused sandbox.

Two per-sandbox files back the swapped memory:

* the swap file, a headerless concatenation of 4096-byte pages addressed by
  the in-memory :class:`SwapIndex`; pages come back one page fault at a time
  with a random read each;
* the REAP file, holding the recorded working set behind a small header so
  that a wake-up can prefetch all of it with one sequential read.

REAP file layout (little-endian)::

    0   magic          8 bytes  b"QRKREAP1"
    8   version        u32      1
    12  count          u32      N
    16  entries[N]     {gpa u64, payload_offset u64}
    ..  zero padding up to the next 4096-byte boundary
    P   payload[N]     4096 bytes each, slot k belongs to entry k

``payload_offset`` is the absolute file offset of the slot.  A file with no
entries is the 16-byte header alone.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence, TypeVar

from .errors import FormatError, RecordingError, SwapCorruptionError, SwapIOError
from .guest_memory import AddressSpace, FaultResolution, GuestMemory, PageTableEntry
from .host_model import PAGE_SIZE, HostMemory, StorageModel

REAP_MAGIC = b"QRKREAP1"
REAP_VERSION = 1
_HEADER = struct.Struct("<8sII")
_ENTRY = struct.Struct("<QQ")
_IOV_MAX = 1024

T = TypeVar("T")


def reap_payload_start(count: int) -> int:
    table_end = _HEADER.size + count * _ENTRY.size
    return -(-table_end // PAGE_SIZE) * PAGE_SIZE


@dataclass(frozen=True)
class ReapEntry:
    gpa: int
    payload_offset: int


@dataclass
class ReapManifest:
    entries: list[ReapEntry] = field(default_factory=list)
    recorded: bool = False

    @classmethod
    def from_gpas(cls, gpas: Sequence[int], recorded: bool = True) -> "ReapManifest":
        start = reap_payload_start(len(gpas))
        return cls(
            [ReapEntry(g, start + k * PAGE_SIZE) for k, g in enumerate(gpas)],
            recorded,
        )

    @property
    def gpas(self) -> list[int]:
        return [e.gpa for e in self.entries]

    def __len__(self) -> int:
        return len(self.entries)


def encode_reap_header(manifest: ReapManifest) -> bytes:
    """Header, entry table and padding; the payload slots follow directly."""
    n = len(manifest.entries)
    start = reap_payload_start(n)
    parts = [_HEADER.pack(REAP_MAGIC, REAP_VERSION, n)]
    for k, entry in enumerate(manifest.entries):
        if entry.payload_offset != start + k * PAGE_SIZE:
            raise FormatError(f"entry {k} payload offset is not slot {k}")
        parts.append(_ENTRY.pack(entry.gpa, entry.payload_offset))
    raw = b"".join(parts)
    return raw if n == 0 else raw.ljust(start, b"\0")


def decode_reap_header(data: bytes) -> ReapManifest:
    if len(data) < _HEADER.size:
        raise FormatError("truncated REAP header")
    magic, version, n = _HEADER.unpack_from(data)
    if magic != REAP_MAGIC:
        raise FormatError(f"bad REAP magic {magic!r}")
    if version != REAP_VERSION:
        raise FormatError(f"unsupported REAP version {version}")
    if len(data) < _HEADER.size + n * _ENTRY.size:
        raise FormatError("truncated REAP entry table")
    start = reap_payload_start(n)
    entries = []
    for k in range(n):
        gpa, off = _ENTRY.unpack_from(data, _HEADER.size + k * _ENTRY.size)
        if off != start + k * PAGE_SIZE:
            raise FormatError(f"entry {k} payload offset {off} is not contiguous")
        if gpa % PAGE_SIZE:
            raise FormatError(f"entry {k} gpa {gpa:#x} not page aligned")
        entries.append(ReapEntry(gpa, off))
    return ReapManifest(entries, recorded=True)


def write_reap_file(path: Path, manifest: ReapManifest, payloads: Iterable[bytes]) -> None:
    """Gathered write of header and payloads, replacing ``path`` atomically."""
    tmp = path.with_name(path.name + ".tmp")
    chunks = [encode_reap_header(manifest)]
    for payload in payloads:
        if len(payload) != PAGE_SIZE:
            raise FormatError("REAP payload must be whole pages")
        chunks.append(payload)
    if len(chunks) - 1 != len(manifest):
        raise FormatError("payload count does not match manifest")
    fd = os.open(tmp, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    try:
        for i in range(0, len(chunks), _IOV_MAX):
            group = chunks[i : i + _IOV_MAX]
            total = sum(map(len, group))
            written = os.writev(fd, group)
            if written < total:
                blob = b"".join(group)[written:]
                while blob:
                    blob = blob[os.write(fd, blob) :]
    finally:
        os.close(fd)
    os.replace(tmp, path)


def read_reap_file(path: Path) -> tuple[ReapManifest, bytes]:
    """Return the manifest and the raw payload region."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise FormatError("truncated REAP header")
        n = _HEADER.unpack(head)[2]
        start = reap_payload_start(n)
        table = head + fh.read(n * _ENTRY.size)
        manifest = decode_reap_header(table)
        if n == 0:
            return manifest, b""
        fh.seek(start)
        payload = fh.read(n * PAGE_SIZE + 1)
    if len(payload) != n * PAGE_SIZE:
        raise SwapCorruptionError(
            f"REAP payload holds {len(payload)} bytes, manifest needs {n * PAGE_SIZE}"
        )
    return manifest, payload


class SwapIndex:
    """Guest-physical page address -> byte offset in the swap file."""

    def __init__(self, path: Path) -> None:
        self.path = path
        self.entries: dict[int, int] = {}
        self.file_size = 0

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, gpa: int) -> bool:
        return gpa in self.entries

    def records(self) -> int:
        """Number of page slots ever written to the swap file."""
        return self.file_size // PAGE_SIZE


@dataclass(frozen=True)
class SwapOutResult:
    pages_written: int
    pages_decommitted: int


@dataclass(frozen=True)
class ReapSwapInResult:
    pages_read: int
    latency: float


@dataclass
class SwapStats:
    swap_faults: int = 0
    swap_fault_latency: float = 0.0
    pages_prefetched: int = 0
    prefetch_latency: float = 0.0


class SwapManager:
    """Swapping for one sandbox; plugs into the guest as its swap handler."""

    def __init__(
        self,
        sandbox_id: str,
        guest: GuestMemory,
        workdir: Path,
        storage: Optional[StorageModel] = None,
    ) -> None:
        self.sandbox_id = sandbox_id
        self.guest = guest
        self.storage = storage if storage is not None else StorageModel()
        workdir.mkdir(parents=True, exist_ok=True)
        self.index = SwapIndex(workdir / f"{sandbox_id}.swap")
        self.reap_path = workdir / f"{sandbox_id}.reap"
        self.manifest: Optional[ReapManifest] = None
        self.reap_layout: Optional[ReapManifest] = None
        self.reap_deflated = False
        self.stats = SwapStats()
        self._recording: Optional[list[int]] = None
        self._record_seen: set[int] = set()
        self._may_record = True
        self._restored: set[int] = set()
        guest.swap = self

    @property
    def host(self) -> HostMemory:
        return self.guest.host

    # -- page-fault swap-out ---------------------------------------------------

    def _active_pages(self) -> dict[int, list[PageTableEntry]]:
        table: dict[int, list[PageTableEntry]] = {}
        for _, _, pte in self.guest.walk():
            if pte.present and not pte.file_backed:
                table.setdefault(pte.phys, []).append(pte)
        return table

    def _write_pages(self, pages: list[int], host: HostMemory) -> dict[int, int]:
        """Write pages to the swap file; undo everything on an I/O error."""
        index = self.index
        old_size = index.file_size
        offsets: dict[int, int] = {}
        cursor = old_size
        try:
            mode = "r+b" if index.path.exists() else "w+b"
            with open(index.path, mode) as fh:
                for gpa in pages:
                    if not host.is_committed(gpa):
                        raise SwapCorruptionError(f"page {gpa:#x} has no host backing")
                    off = index.entries.get(gpa)
                    if off is None:
                        off = cursor
                        cursor += PAGE_SIZE
                    fh.seek(off)
                    fh.write(host.commit(gpa))
                    offsets[gpa] = off
        except OSError as exc:
            if index.path.exists():
                os.truncate(index.path, old_size)
            raise SwapIOError(f"swap file write failed: {exc}") from exc
        index.file_size = cursor
        return offsets

    def swap_out(self, host: Optional[HostMemory] = None) -> SwapOutResult:
        """Write every present anonymous page once and mark its PTEs swapped."""
        host = host if host is not None else self.host
        table = self._active_pages()
        if not table:
            return SwapOutResult(0, 0)
        offsets = self._write_pages(list(table), host)
        self.index.entries.update(offsets)
        decommitted = 0
        for gpa, ptes in table.items():
            for pte in ptes:
                pte.present = False
                pte.swapped_out = True
            decommitted += host.decommit_page(gpa)
            self._restored.discard(gpa)
        return SwapOutResult(len(table), decommitted)

    # -- page-fault swap-in --------------------------------------------------------

    def _read_slot(self, offset: int) -> bytes:
        with open(self.index.path, "rb") as fh:
            fh.seek(offset)
            data = fh.read(PAGE_SIZE)
        if len(data) != PAGE_SIZE:
            raise SwapCorruptionError(f"short read at swap offset {offset}")
        return data

    def handle_swap_fault(self, space: AddressSpace, vaddr: int) -> Optional[FaultResolution]:
        pte = space.ptes.get(vaddr)
        if pte is None or pte.present:
            return None
        if not pte.swapped_out:
            raise SwapCorruptionError(f"{vaddr:#x} is neither present nor swapped")
        gpa = pte.phys
        offset = self.index.entries.get(gpa)
        if offset is None:
            raise SwapCorruptionError(f"no swap index entry for {gpa:#x}")
        data = self._read_slot(offset)
        allocator = self.guest.allocator
        if gpa in self._restored:
            # a sharer already brought this page back; this one gets a private copy
            new = allocator.alloc_page()
            self.host.fill(new, data)
            if allocator.dec_ref(gpa):
                self.forget(gpa)
            vma = space.find_vma(vaddr)
            pte.phys = new
            pte.cow = False
            pte.writable = bool(vma and vma.writable)
        else:
            self.host.fill(gpa, data)
            self._restored.add(gpa)
        pte.swapped_out = False
        pte.present = True
        latency = self.storage.read_latency(1, "random")
        self.stats.swap_faults += 1
        self.stats.swap_fault_latency += latency
        if self._recording is not None and pte.phys not in self._record_seen:
            self._record_seen.add(pte.phys)
            self._recording.append(pte.phys)
        return FaultResolution("swap-in", pages_read=1, latency=latency)

    def forget(self, phys: int) -> None:
        """Drop the index entry of a page the guest freed."""
        self.index.entries.pop(phys, None)
        self._restored.discard(phys)

    # -- REAP --------------------------------------------------------------------

    @property
    def recording(self) -> bool:
        return self._recording is not None

    def start_recording(self) -> None:
        if self._recording is not None or not self._may_record:
            raise RecordingError("working set already recorded since the last hibernation")
        self._recording = []
        self._record_seen = set()

    def finish_recording(self) -> ReapManifest:
        if self._recording is None:
            raise RecordingError("no recording in progress")
        self.manifest = ReapManifest.from_gpas(self._recording, recorded=True)
        self._recording = None
        self._may_record = False
        return self.manifest

    def reap_record(self, run: Callable[[], T]) -> tuple[ReapManifest, T]:
        """Record the swap-in working set of ``run()``."""
        self.start_recording()
        try:
            result = run()
        except BaseException:
            self._recording = None
            raise
        return self.finish_recording(), result

    def hibernated(self) -> None:
        """Called by the lifecycle whenever the sandbox enters Hibernate."""
        self._may_record = True

    def reap_swap_out(self, host: Optional[HostMemory] = None) -> int:
        """Batch-write the active anonymous set to the REAP file, PTEs untouched."""
        host = host if host is not None else self.host
        if self.manifest is None or not self.manifest.recorded:
            raise RecordingError("REAP swap-out needs a recorded manifest")
        table = self._active_pages()
        ordered = [g for g in self.manifest.gpas if g in table]
        seen = set(ordered)
        ordered += [g for g in table if g not in seen]
        layout = ReapManifest.from_gpas(ordered)
        for gpa in ordered:
            if not host.is_committed(gpa):
                raise SwapCorruptionError(f"page {gpa:#x} has no host backing")
        try:
            write_reap_file(self.reap_path, layout, (bytes(host.commit(g)) for g in ordered))
        except OSError as exc:
            Path(str(self.reap_path) + ".tmp").unlink(missing_ok=True)
            raise SwapIOError(f"REAP file write failed: {exc}") from exc
        for gpa in ordered:
            host.decommit_page(gpa)
            self._restored.discard(gpa)
        self.reap_layout = layout
        self.reap_deflated = True
        return len(ordered)

    def reap_swap_in(self, host: Optional[HostMemory] = None) -> ReapSwapInResult:
        """Prefetch the whole REAP payload with one sequential read."""
        host = host if host is not None else self.host
        if not self.reap_deflated:
            raise SwapCorruptionError("sandbox is not REAP-deflated")
        manifest, payload = read_reap_file(self.reap_path)
        if self.reap_layout is not None and manifest.entries != self.reap_layout.entries:
            raise SwapCorruptionError("REAP file does not match the written manifest")
        for k, entry in enumerate(manifest.entries):
            host.fill(entry.gpa, payload[k * PAGE_SIZE : (k + 1) * PAGE_SIZE])
        n = len(manifest)
        latency = self.storage.read_latency(n, "sequential")
        self.reap_deflated = False
        self.stats.pages_prefetched += n
        self.stats.prefetch_latency += latency
        return ReapSwapInResult(n, latency)

    # -- teardown ------------------------------------------------------------------

    def close(self) -> None:
        """Delete both per-sandbox files."""
        self.index.path.unlink(missing_ok=True)
        self.reap_path.unlink(missing_ok=True)
        self.index.entries.clear()
        self.index.file_size = 0
