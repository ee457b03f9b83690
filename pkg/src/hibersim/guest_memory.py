"""Guest process virtual memory.

Each :class:`AddressSpace` owns a list of VMAs and a flat page table keyed by
page-aligned virtual address.  Pages are only allocated and committed when a
fault touches them.  Anonymous pages come from the bitmap
:class:`~hibersim.page_allocator.Allocator`; file-backed pages live in a
per-file window of guest-physical space and are re-read from the
:class:`FileStore` whenever they are materialized.
"""

from __future__ import annotations

import bisect
import hashlib
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Iterator, Literal, Optional, Protocol

from .errors import (
    AddressSpaceExhausted,
    AuditError,
    PermissionFault,
    SegmentationFault,
)
from .host_model import BLOCK_SIZE, PAGE_SIZE, ZERO_PAGE, HostMemory
from .page_allocator import Allocator

Access = Literal["read", "write"]
VmaKind = Literal["anonymous", "file"]
FaultKind = Literal["fresh-zero-fill", "cow-copy", "swap-in", "file-materialize"]

USER_BASE = 0x0001_0000_0000
USER_LIMIT = 1 << 47
FILE_REGION_BASE = 1 << 40


@dataclass
class PageTableEntry:
    phys: int
    present: bool = True
    swapped_out: bool = False  # the software "swapped" bit (bit 9 on x86)
    writable: bool = False
    cow: bool = False
    file_backed: bool = False


@dataclass(frozen=True)
class Vma:
    id: int
    start: int
    end: int
    kind: VmaKind
    writable: bool
    file_id: Optional[str] = None

    def __contains__(self, vaddr: int) -> bool:
        return self.start <= vaddr < self.end

    @property
    def npages(self) -> int:
        return (self.end - self.start) // PAGE_SIZE

    def pages(self) -> range:
        return range(self.start, self.end, PAGE_SIZE)


@dataclass(frozen=True)
class FaultResolution:
    kind: FaultKind
    pages_read: int = 0
    latency: float = 0.0


class SwapHandler(Protocol):
    def handle_swap_fault(self, space: "AddressSpace", vaddr: int) -> FaultResolution: ...

    def forget(self, phys: int) -> None: ...


@dataclass
class AddressSpace:
    owner: int
    vmas: list[Vma] = field(default_factory=list)
    ptes: dict[int, PageTableEntry] = field(default_factory=dict)
    cursor: int = USER_BASE

    def find_vma(self, vaddr: int) -> Optional[Vma]:
        i = bisect.bisect_right([v.start for v in self.vmas], vaddr) - 1
        if i >= 0 and vaddr in self.vmas[i]:
            return self.vmas[i]
        return None

    def vma(self, vma_id: int) -> Vma:
        for v in self.vmas:
            if v.id == vma_id:
                return v
        raise KeyError(vma_id)


def content_id(data: bytes) -> str:
    """File id of ``data`` as stored (zero padded to whole pages)."""
    padded = data + bytes(-len(data) % PAGE_SIZE)
    return hashlib.sha256(padded).hexdigest()[:16]


class FileStore:
    """Content-addressed store of guest files.

    A file id is the hex SHA-256 prefix of its content.  Every file gets its
    own 4 MB aligned window of guest-physical addresses for its page cache.
    """

    def __init__(self, base: int = FILE_REGION_BASE) -> None:
        self._data: dict[str, bytes] = {}
        self._base: dict[str, int] = {}
        self._cursor = base

    def add(self, data: bytes) -> str:
        padded = data + bytes(-len(data) % PAGE_SIZE)
        file_id = content_id(data)
        if file_id not in self._data:
            self._data[file_id] = padded
            self._base[file_id] = self._cursor
            span = max(len(padded), PAGE_SIZE)
            self._cursor += -(-span // BLOCK_SIZE) * BLOCK_SIZE
        return file_id

    def npages(self, file_id: str) -> int:
        return len(self._data[file_id]) // PAGE_SIZE

    def page(self, file_id: str, index: int) -> bytes:
        off = index * PAGE_SIZE
        data = self._data[file_id]
        if not 0 <= off < len(data):
            raise SegmentationFault(f"page {index} beyond end of file {file_id}")
        return data[off : off + PAGE_SIZE]

    def page_gpa(self, file_id: str, index: int) -> int:
        return self._base[file_id] + index * PAGE_SIZE


class GuestMemory:
    """All address spaces of one sandbox plus the shared backing objects."""

    def __init__(
        self,
        host: HostMemory,
        allocator: Optional[Allocator] = None,
        files: Optional[FileStore] = None,
    ) -> None:
        self.host = host
        self.allocator = allocator if allocator is not None else Allocator(host=host)
        self.files = files if files is not None else FileStore()
        self.spaces: dict[int, AddressSpace] = {}
        self.swap: Optional[SwapHandler] = None
        self._next_owner = 1
        self._next_vma = 1
        self._file_maps: Counter[int] = Counter()

    # -- spaces and regions -------------------------------------------------

    def new_space(self) -> AddressSpace:
        space = AddressSpace(owner=self._next_owner)
        self._next_owner += 1
        self.spaces[space.owner] = space
        return space

    def map_region(
        self,
        space: AddressSpace,
        length: int,
        kind: VmaKind = "anonymous",
        writable: bool = True,
        file_id: Optional[str] = None,
    ) -> int:
        """Reserve address space only; no page is allocated or committed."""
        if length <= 0:
            raise ValueError("length must be positive")
        if kind == "file":
            if file_id is None:
                raise ValueError("file mappings need a file_id")
            if writable:
                raise ValueError("writable file mappings are not supported")
        elif file_id is not None:
            raise ValueError("anonymous mappings take no file_id")
        npages = -(-length // PAGE_SIZE)
        start = space.cursor
        end = start + npages * PAGE_SIZE
        if end > USER_LIMIT:
            raise AddressSpaceExhausted(f"space {space.owner} cannot fit {length} bytes")
        space.cursor = end
        vma = Vma(self._next_vma, start, end, kind, writable, file_id)
        self._next_vma += 1
        space.vmas.append(vma)
        return vma.id

    def unmap_region(self, space: AddressSpace, vma_id: int) -> int:
        """munmap a whole VMA; return the number of pages freed."""
        vma = space.vma(vma_id)
        freed = 0
        for vaddr in vma.pages():
            pte = space.ptes.pop(vaddr, None)
            if pte is not None:
                freed += self._release_pte(pte)
        space.vmas.remove(vma)
        return freed

    def _release_pte(self, pte: PageTableEntry) -> int:
        if pte.file_backed:
            self._unmap_file_page(pte.phys)
            return 0
        freed = self.allocator.dec_ref(pte.phys)
        if freed and pte.swapped_out and self.swap is not None:
            self.swap.forget(pte.phys)
        return int(freed)

    def _unmap_file_page(self, gpa: int) -> int:
        self._file_maps[gpa] -= 1
        if self._file_maps[gpa] == 0:
            del self._file_maps[gpa]
            return self.host.decommit_page(gpa)
        return 0

    # -- faults --------------------------------------------------------------

    def needs_fault(self, space: AddressSpace, vaddr: int, access: Access) -> bool:
        pte = space.ptes.get(vaddr & ~(PAGE_SIZE - 1))
        if pte is None or not pte.present:
            return True
        return access == "write" and not pte.writable

    def handle_fault(
        self, space: AddressSpace, vaddr: int, access: Access
    ) -> Optional[FaultResolution]:
        """Resolve one fault.  Returns None when the PTE already allows the access."""
        page = vaddr & ~(PAGE_SIZE - 1)
        vma = space.find_vma(page)
        if vma is None:
            raise SegmentationFault(f"space {space.owner}: {vaddr:#x} is not mapped")
        if access == "write" and not vma.writable:
            raise PermissionFault(f"space {space.owner}: write to read-only {vaddr:#x}")
        pte = space.ptes.get(page)
        if pte is None:
            if vma.kind == "file":
                return self._materialize(space, vma, page)
            phys = self.allocator.alloc_page()
            # a reused page may still hold stale bytes until it was reclaimed
            self.host.fill(phys, ZERO_PAGE)
            space.ptes[page] = PageTableEntry(phys, writable=vma.writable)
            return FaultResolution("fresh-zero-fill")
        if pte.swapped_out:
            if self.swap is None:
                raise SegmentationFault(f"swapped page {page:#x} but no swap handler")
            return self.swap.handle_swap_fault(space, page)
        if access == "write" and pte.cow:
            return self._break_cow(pte, vma)
        return None

    def _materialize(self, space: AddressSpace, vma: Vma, page: int) -> FaultResolution:
        index = (page - vma.start) // PAGE_SIZE
        gpa = self.files.page_gpa(vma.file_id, index)
        if not self.host.is_committed(gpa):
            self.host.fill(gpa, self.files.page(vma.file_id, index))
        self._file_maps[gpa] += 1
        space.ptes[page] = PageTableEntry(gpa, writable=False, file_backed=True)
        return FaultResolution("file-materialize")

    def _break_cow(self, pte: PageTableEntry, vma: Vma) -> FaultResolution:
        old = pte.phys
        if self.allocator.refcount(old) > 1:
            new = self.allocator.alloc_page()
            self.host.fill(new, bytes(self.host.commit(old)))
            self.allocator.dec_ref(old)
            pte.phys = new
        pte.cow = False
        pte.writable = vma.writable
        return FaultResolution("cow-copy")

    def touch(self, space: AddressSpace, vaddr: int, access: Access = "read") -> list[FaultResolution]:
        """Access one address, resolving faults until it is satisfied."""
        faults = []
        while self.needs_fault(space, vaddr, access):
            res = self.handle_fault(space, vaddr, access)
            if res is None:
                break
            faults.append(res)
        return faults

    def read_page(self, space: AddressSpace, vaddr: int) -> bytes:
        page = vaddr & ~(PAGE_SIZE - 1)
        self.touch(space, page, "read")
        return bytes(self.host.commit(space.ptes[page].phys))

    def write(self, space: AddressSpace, vaddr: int, data: bytes) -> list[FaultResolution]:
        page = vaddr & ~(PAGE_SIZE - 1)
        faults = self.touch(space, page, "write")
        self.host.write(space.ptes[page].phys, data, vaddr - page)
        return faults

    # -- process lifecycle ---------------------------------------------------

    def clone_space(self, space: AddressSpace) -> AddressSpace:
        """Fork: share every anonymous page copy-on-write."""
        child = self.new_space()
        child.cursor = space.cursor
        child.vmas = list(space.vmas)
        for vaddr, pte in space.ptes.items():
            if pte.file_backed:
                if pte.present:
                    self._file_maps[pte.phys] += 1
                child.ptes[vaddr] = replace(pte)
                continue
            self.allocator.inc_ref(pte.phys)
            pte.cow = True
            pte.writable = False
            child.ptes[vaddr] = replace(pte)
        return child

    def drop_space(self, space: AddressSpace) -> int:
        """Process exit: release every page and mapping; return pages freed."""
        freed = 0
        for vaddr in sorted(space.ptes):
            freed += self._release_pte(space.ptes[vaddr])
        space.ptes.clear()
        space.vmas.clear()
        self.spaces.pop(space.owner, None)
        return freed

    def release_file_backed(self, space: AddressSpace, host: Optional[HostMemory] = None) -> int:
        """Unmap every present file-backed page and return its host memory."""
        host = host if host is not None else self.host
        released = 0
        for vaddr in [v for v, p in space.ptes.items() if p.file_backed and p.present]:
            gpa = space.ptes.pop(vaddr).phys
            self._file_maps[gpa] -= 1
            if self._file_maps[gpa] == 0:
                del self._file_maps[gpa]
                host.decommit_page(gpa)
            released += 1
        return released

    # -- walks ---------------------------------------------------------------

    def walk(self) -> Iterator[tuple[AddressSpace, int, PageTableEntry]]:
        """Every PTE ordered by (owner, vaddr)."""
        for owner in sorted(self.spaces):
            space = self.spaces[owner]
            for vaddr in sorted(space.ptes):
                yield space, vaddr, space.ptes[vaddr]

    def anonymous_pages(self, present_only: bool = True) -> set[int]:
        return {
            pte.phys
            for _, _, pte in self.walk()
            if not pte.file_backed and (pte.present or not present_only)
        }

    def file_pages(self) -> set[int]:
        return set(self._file_maps)

    def audit(self) -> None:
        refs: Counter[int] = Counter()
        file_refs: Counter[int] = Counter()
        for space, vaddr, pte in self.walk():
            if pte.present and pte.swapped_out:
                raise AuditError(f"{vaddr:#x} in space {space.owner} is present and swapped")
            vma = space.find_vma(vaddr)
            if vma is None:
                raise AuditError(f"PTE {vaddr:#x} outside every VMA of space {space.owner}")
            if pte.file_backed != (vma.kind == "file"):
                raise AuditError(f"PTE {vaddr:#x} kind disagrees with its VMA")
            if pte.file_backed:
                if pte.present:
                    file_refs[pte.phys] += 1
            else:
                refs[pte.phys] += 1
        for phys, count in refs.items():
            actual = self.allocator.refcount(phys)
            if actual != count:
                raise AuditError(f"page {phys:#x}: {count} PTEs but refcount {actual}")
        if self.allocator.allocated_count() != len(refs):
            raise AuditError("allocator holds pages no page table references")
        if file_refs != self._file_maps:
            raise AuditError("file page map counts out of sync")
        vmas_ok = all(
            a.end <= b.start
            for s in self.spaces.values()
            for a, b in zip(s.vmas, s.vmas[1:])
        )
        if not vmas_ok:
            raise AuditError("overlapping VMAs")
