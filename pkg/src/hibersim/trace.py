"""Memory traces replayed against a sandbox's guest memory.

A trace is a list of operations naming regions symbolically; the
:class:`TraceRunner` keeps the region-name -> VMA binding for one sandbox.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence, Union

from .guest_memory import AddressSpace, FaultResolution, GuestMemory, Vma
from .host_model import PAGE_SIZE


@dataclass(frozen=True)
class MapRegion:
    region: str
    npages: int
    kind: Literal["anonymous", "file"] = "anonymous"
    file_id: Optional[str] = None


@dataclass(frozen=True)
class Touch:
    region: str
    page: int
    access: Literal["read", "write"] = "read"


@dataclass(frozen=True)
class Unmap:
    region: str


TraceOp = Union[MapRegion, Touch, Unmap]


def page_stamp(region: str, page: int) -> bytes:
    """Deterministic 16-byte marker written at the start of a touched page."""
    return hashlib.blake2b(f"{region}:{page}".encode(), digest_size=16).digest()


@dataclass
class Workload:
    """Init trace, per-request trace and the modeled request compute time."""

    name: str
    init_trace: Sequence[TraceOp]
    request_trace: Sequence[Touch]
    request_compute_cost: float = 0.0
    files: Sequence[bytes] = ()


@dataclass
class TraceResult:
    faults: list[FaultResolution] = field(default_factory=list)
    accesses: int = 0

    @property
    def fault_latency(self) -> float:
        return sum(f.latency for f in self.faults)

    def count(self, kind: str) -> int:
        return sum(1 for f in self.faults if f.kind == kind)


class TraceRunner:
    """Replays traces in one guest address space."""

    def __init__(self, guest: GuestMemory, space: Optional[AddressSpace] = None) -> None:
        self.guest = guest
        self.space = space if space is not None else guest.new_space()
        self.regions: dict[str, Vma] = {}

    def run(self, trace: Sequence[TraceOp]) -> TraceResult:
        result = TraceResult()
        for op in trace:
            if isinstance(op, Touch):
                vma = self.regions[op.region]
                if not 0 <= op.page < vma.npages:
                    raise IndexError(f"page {op.page} outside region {op.region!r}")
                vaddr = vma.start + op.page * PAGE_SIZE
                if op.access == "write":
                    result.faults += self.guest.write(self.space, vaddr, page_stamp(op.region, op.page))
                else:
                    result.faults += self.guest.touch(self.space, vaddr, "read")
                result.accesses += 1
            elif isinstance(op, MapRegion):
                if op.region in self.regions:
                    raise ValueError(f"region {op.region!r} already mapped")
                writable = op.kind == "anonymous"
                vma_id = self.guest.map_region(
                    self.space, op.npages * PAGE_SIZE, op.kind, writable, op.file_id
                )
                self.regions[op.region] = self.space.vma(vma_id)
            elif isinstance(op, Unmap):
                vma = self.regions.pop(op.region)
                self.guest.unmap_region(self.space, vma.id)
            else:
                raise TypeError(f"unknown trace op {op!r}")
        return result
