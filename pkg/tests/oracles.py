"""Naive reference models used as test oracles.

Deliberately simple and independent of the package internals: plain sets,
lists and dicts, no bitmaps.
"""

from __future__ import annotations

BLOCK = 4 * 1024 * 1024
PAGE = 4096


class NaiveAllocator:
    """Sorted-set + count-map model of the allocation policy.

    Policy: allocate the lowest free page of the head block; new blocks and
    blocks that regain their first free page go to the head of the list;
    full blocks leave the list.
    """

    def __init__(self, base: int = 0x4000_0000) -> None:
        self.base = base
        self.nblocks = 0
        self.free_list: list[int] = []
        self.free: dict[int, set[int]] = {}
        self.refs: dict[int, int] = {}

    def alloc(self) -> int:
        if not self.free_list:
            block = self.base + self.nblocks * BLOCK
            self.nblocks += 1
            self.free[block] = set(range(1, 1024))
            self.free_list.insert(0, block)
        block = self.free_list[0]
        index = min(self.free[block])
        self.free[block].remove(index)
        if not self.free[block]:
            self.free_list.pop(0)
        page = block + index * PAGE
        self.refs[page] = 1
        return page

    def inc(self, page: int) -> int:
        self.refs[page] += 1
        return self.refs[page]

    def dec(self, page: int) -> bool:
        self.refs[page] -= 1
        if self.refs[page]:
            return False
        del self.refs[page]
        block = page - page % BLOCK
        self.free[block].add((page - block) // PAGE)
        if len(self.free[block]) == 1:
            self.free_list.insert(0, block)
        return True

    def allocated(self) -> list[int]:
        return sorted(self.refs)


def random_read_seconds(n: int, bps: float = 100e6, switch: float = 15e-6) -> float:
    """Closed form: n single-page reads, each paying one guest/host switch."""
    return n * (PAGE / bps + switch)


def sequential_read_seconds(n: int, bps: float = 1e9) -> float:
    """Closed form: one batched read of n contiguous pages."""
    return n * PAGE / bps
