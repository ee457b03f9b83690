"""Bitmap page allocator for 4 KB guest user pages.

Memory comes from 4 MB aligned blocks.  Page 0 of every block is a control
page holding the free-list link, a two-level free bitmap (one L1 word over
sixteen L2 words) and the per-page reference counts.  Free pages carry no
metadata, so they can be handed back to the host with ``decommit`` without
corrupting the allocator.

Layout of a packed control page (little-endian, 2190 of 4096 bytes used)::

    next        u64        block address of the next free-list block, 0 = end
    l1          u64        bit i set <=> l2[i] != 0
    l2[16]      u64        bit j of word i set <=> page i*64+j is free
    refs[1023]  u16        reference counts of pages 1..1023
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field
from typing import Iterator, Optional

from .errors import (
    AllocationError,
    AllocatorCorruption,
    DoubleFreeError,
    RefcountOverflowError,
)
from .host_model import BLOCK_SHIFT, BLOCK_SIZE, PAGE_SIZE, PAGES_PER_BLOCK, HostMemory

L2_WORDS = PAGES_PER_BLOCK // 64
DATA_PAGES = PAGES_PER_BLOCK - 1
REFCOUNT_MAX = 0xFFFF
WORD_MASK = (1 << 64) - 1

_CONTROL_LAYOUT = struct.Struct(f"<QQ{L2_WORDS}Q{DATA_PAGES}H")
CONTROL_PAGE_USED_BYTES = _CONTROL_LAYOUT.size

_BLOCK_MASK = BLOCK_SIZE - 1


def control_page_of(addr: int) -> int:
    """Address of the control page owning ``addr``: clear the low 22 bits."""
    return addr & ~_BLOCK_MASK


def _lowest_bit(word: int) -> int:
    return (word & -word).bit_length() - 1


class AtomicU16Array:
    """Fixed array of 16-bit counters with fetch-add/fetch-sub.

    Stands in for hardware atomics; the tiny internal lock is never held
    across anything but one read-modify-write.
    """

    __slots__ = ("_values", "_lock")

    def __init__(self, size: int) -> None:
        self._values = [0] * size
        self._lock = threading.Lock()

    def load(self, index: int) -> int:
        return self._values[index]

    def store(self, index: int, value: int) -> None:
        if not 0 <= value <= REFCOUNT_MAX:
            raise RefcountOverflowError(f"value {value} outside u16")
        self._values[index] = value

    def fetch_add(self, index: int, delta: int = 1) -> int:
        with self._lock:
            old = self._values[index]
            new = old + delta
            if new > REFCOUNT_MAX:
                raise RefcountOverflowError(f"refcount {old} + {delta} overflows u16")
            self._values[index] = new
            return old

    def fetch_sub(self, index: int, delta: int = 1) -> int:
        with self._lock:
            old = self._values[index]
            if old < delta:
                raise DoubleFreeError(f"refcount {old} - {delta} underflows")
            self._values[index] = old - delta
            return old

    def snapshot(self) -> list[int]:
        return list(self._values)


@dataclass(eq=False)
class ControlPage:
    """Metadata stored in the first page of a 4 MB block."""

    address: int
    next: Optional[int] = None
    l1: int = (1 << L2_WORDS) - 1
    l2: list[int] = field(
        default_factory=lambda: [WORD_MASK & ~1] + [WORD_MASK] * (L2_WORDS - 1)
    )
    refcounts: AtomicU16Array = field(default_factory=lambda: AtomicU16Array(PAGES_PER_BLOCK))
    free_count: int = DATA_PAGES
    on_free_list: bool = False

    def is_free(self, index: int) -> bool:
        return bool(self.l2[index >> 6] >> (index & 63) & 1)

    def free_indices(self) -> Iterator[int]:
        for i, word in enumerate(self.l2):
            while word:
                j = _lowest_bit(word)
                yield i * 64 + j
                word &= word - 1

    def pack(self) -> bytes:
        """Serialize into a 4096-byte page image."""
        refs = self.refcounts.snapshot()[1:]
        raw = _CONTROL_LAYOUT.pack(self.next or 0, self.l1, *self.l2, *refs)
        return raw.ljust(PAGE_SIZE, b"\0")

    @classmethod
    def unpack(cls, address: int, image: bytes) -> "ControlPage":
        fields = _CONTROL_LAYOUT.unpack_from(image)
        nxt, l1 = fields[0], fields[1]
        l2 = list(fields[2 : 2 + L2_WORDS])
        refs = AtomicU16Array(PAGES_PER_BLOCK)
        for idx, value in enumerate(fields[2 + L2_WORDS :], start=1):
            refs.store(idx, value)
        free = sum(bin(w).count("1") for w in l2)
        return cls(address, nxt or None, l1, l2, refs, free)


class HeapSource:
    """Global-heap stand-in handing out fresh 4 MB aligned block addresses.

    Addresses come from a monotone sequence and are never reused.
    ``max_blocks`` bounds how many blocks may be outstanding at once.
    """

    def __init__(self, base: int = 0x4000_0000, max_blocks: Optional[int] = None) -> None:
        if base % BLOCK_SIZE:
            raise ValueError("heap base must be 4 MB aligned")
        self._next = base
        self.max_blocks = max_blocks
        self.outstanding = 0
        self.returned: list[int] = []

    def acquire(self) -> int:
        if self.max_blocks is not None and self.outstanding >= self.max_blocks:
            raise AllocationError("global heap exhausted")
        addr = self._next
        self._next += BLOCK_SIZE
        self.outstanding += 1
        return addr

    def release(self, block: int) -> None:
        self.outstanding -= 1
        self.returned.append(block)


@dataclass
class AllocatorStats:
    blocks_acquired: int = 0
    blocks_returned: int = 0
    pages_reclaimed: int = 0
    allocations: int = 0
    lookup_word_reads: int = 0


class Allocator:
    """Bitmap page allocator.

    ``alloc_page`` and free-list edits run under one allocator-wide lock;
    reference counting goes through the per-block atomic counters.
    """

    def __init__(self, heap: Optional[HeapSource] = None, host: Optional[HostMemory] = None) -> None:
        self.heap = heap if heap is not None else HeapSource()
        self.host = host
        self.blocks: dict[int, ControlPage] = {}
        self.free_head: Optional[int] = None
        self.stats = AllocatorStats()
        self.last_lookup_reads = 0
        self._lock = threading.Lock()

    # -- free list ---------------------------------------------------------

    def free_list(self) -> list[int]:
        out = []
        cur = self.free_head
        while cur is not None:
            out.append(cur)
            cur = self.blocks[cur].next
        return out

    def _push_free(self, cp: ControlPage) -> None:
        cp.next = self.free_head
        cp.on_free_list = True
        self.free_head = cp.address

    def _unlink_free(self, cp: ControlPage) -> None:
        if self.free_head == cp.address:
            self.free_head = cp.next
        else:
            prev = self.blocks[self.free_head] if self.free_head is not None else None
            while prev is not None and prev.next != cp.address:
                prev = self.blocks[prev.next] if prev.next is not None else None
            if prev is None:
                raise AllocatorCorruption(f"block {cp.address:#x} missing from free list")
            prev.next = cp.next
        cp.next = None
        cp.on_free_list = False

    def _acquire_block(self) -> ControlPage:
        addr = self.heap.acquire()
        if addr % BLOCK_SIZE:
            raise AllocatorCorruption(f"heap returned unaligned block {addr:#x}")
        cp = ControlPage(addr)
        self.blocks[addr] = cp
        self.stats.blocks_acquired += 1
        if self.host is not None:
            self.host.commit(addr)
        return cp

    # -- allocation --------------------------------------------------------

    def alloc_page(self) -> int:
        with self._lock:
            if self.free_head is None:
                self._push_free(self._acquire_block())
            cp = self.blocks[self.free_head]
            # the lookup reads exactly one L1 word and one L2 word
            l1 = cp.l1
            if l1 == 0:
                raise AllocatorCorruption(f"free-list head {cp.address:#x} has no free page")
            i = _lowest_bit(l1)
            word = cp.l2[i]
            self.last_lookup_reads = 2
            self.stats.lookup_word_reads += 2
            j = _lowest_bit(word)
            word &= word - 1
            cp.l2[i] = word
            if word == 0:
                cp.l1 = l1 & ~(1 << i)
            index = i * 64 + j
            cp.refcounts.store(index, 1)
            cp.free_count -= 1
            if cp.free_count == 0:
                self.free_head = cp.next
                cp.next = None
                cp.on_free_list = False
            self.stats.allocations += 1
            return cp.address + index * PAGE_SIZE

    def _control(self, page: int) -> tuple[ControlPage, int]:
        cp = self.blocks.get(control_page_of(page))
        index = (page - control_page_of(page)) // PAGE_SIZE
        if cp is None or page % PAGE_SIZE or index == 0:
            raise AllocatorCorruption(f"{page:#x} is not a managed data page")
        return cp, index

    def refcount(self, page: int) -> int:
        cp, index = self._control(page)
        return cp.refcounts.load(index)

    def inc_ref(self, page: int) -> int:
        cp, index = self._control(page)
        old = cp.refcounts.load(index)
        if old == 0:
            raise AllocatorCorruption(f"inc_ref on free page {page:#x}")
        return cp.refcounts.fetch_add(index) + 1

    def dec_ref(self, page: int) -> bool:
        """Drop one reference; return True when the page became free."""
        cp, index = self._control(page)
        if cp.refcounts.fetch_sub(index) != 1:
            return False
        with self._lock:
            i, j = index >> 6, index & 63
            cp.l2[i] |= 1 << j
            cp.l1 |= 1 << i
            cp.free_count += 1
            if cp.free_count == 1:
                self._push_free(cp)
        return True

    # -- queries -----------------------------------------------------------

    def allocated_pages(self) -> Iterator[int]:
        for addr in sorted(self.blocks):
            cp = self.blocks[addr]
            for index in range(1, PAGES_PER_BLOCK):
                if not cp.is_free(index):
                    yield addr + index * PAGE_SIZE

    def allocated_count(self) -> int:
        return sum(DATA_PAGES - cp.free_count for cp in self.blocks.values())

    def returnable_blocks(self) -> list[int]:
        """Blocks whose every data page is free."""
        return sorted(a for a, cp in self.blocks.items() if cp.free_count == DATA_PAGES)

    def control_pages(self) -> list[int]:
        return sorted(self.blocks)

    # -- reclamation -------------------------------------------------------

    def reclaim_free_pages(self, host: HostMemory) -> int:
        """Decommit every free data page; give fully free blocks back to the heap.

        Caller guarantees no concurrent allocator use.  Returns the number of
        data pages the host actually dropped.
        """
        reclaimed = 0
        for addr in sorted(self.blocks):
            cp = self.blocks[addr]
            if cp.free_count == DATA_PAGES:
                reclaimed += host.decommit(addr + PAGE_SIZE, addr + BLOCK_SIZE)
                host.decommit_page(addr)
                self._unlink_free(cp)
                del self.blocks[addr]
                self.heap.release(addr)
                self.stats.blocks_returned += 1
                continue
            run_start = run_end = None
            for index in cp.free_indices():
                page = addr + index * PAGE_SIZE
                if run_end == page:
                    run_end += PAGE_SIZE
                    continue
                if run_start is not None:
                    reclaimed += host.decommit(run_start, run_end)
                run_start, run_end = page, page + PAGE_SIZE
            if run_start is not None:
                reclaimed += host.decommit(run_start, run_end)
        self.stats.pages_reclaimed += reclaimed
        return reclaimed

    # -- invariants --------------------------------------------------------

    def audit(self) -> None:
        """Walk every block and raise :class:`AllocatorCorruption` on any violation."""
        listed = self.free_list()
        if len(listed) != len(set(listed)):
            raise AllocatorCorruption("free list contains a cycle or duplicate")
        listed_set = set(listed)
        for addr, cp in self.blocks.items():
            if addr % BLOCK_SIZE or control_page_of(addr) != addr:
                raise AllocatorCorruption(f"block {addr:#x} not 4 MB aligned")
            if cp.l2[0] & 1:
                raise AllocatorCorruption(f"control page of {addr:#x} marked free")
            for i, word in enumerate(cp.l2):
                if bool(cp.l1 >> i & 1) != (word != 0):
                    raise AllocatorCorruption(f"L1 bit {i} inconsistent in {addr:#x}")
            if cp.l1 >> L2_WORDS:
                raise AllocatorCorruption(f"L1 has bits beyond word {L2_WORDS}")
            free = sum(bin(w).count("1") for w in cp.l2)
            if free != cp.free_count or not 0 <= free <= DATA_PAGES:
                raise AllocatorCorruption(f"free count mismatch in {addr:#x}")
            for index in range(1, PAGES_PER_BLOCK):
                if (cp.refcounts.load(index) > 0) == cp.is_free(index):
                    raise AllocatorCorruption(
                        f"page {addr + index * PAGE_SIZE:#x} refcount/bitmap mismatch"
                    )
            if (free > 0) != (addr in listed_set) or cp.on_free_list != (addr in listed_set):
                raise AllocatorCorruption(f"free-list membership wrong for {addr:#x}")
        if not listed_set <= self.blocks.keys():
            raise AllocatorCorruption("free list names an unmanaged block")


__all__ = [
    "Allocator",
    "AllocatorStats",
    "AtomicU16Array",
    "CONTROL_PAGE_USED_BYTES",
    "ControlPage",
    "DATA_PAGES",
    "HeapSource",
    "L2_WORDS",
    "REFCOUNT_MAX",
    "control_page_of",
]
