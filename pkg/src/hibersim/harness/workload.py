"""Seed-deterministic synthetic workloads."""

from __future__ import annotations

import math
import random
from fractions import Fraction

from ..host_model import PAGE_SIZE
from ..guest_memory import content_id
from ..trace import MapRegion, Touch, TraceOp, Unmap, Workload
from .config import ScenarioConfig


def working_set_size(fraction: float, pages: int) -> int:
    """ceil(fraction * pages), computed exactly on the decimal value."""
    return math.ceil(Fraction(repr(fraction)) * pages)


def build_workload(config: ScenarioConfig) -> Workload:
    """Init writes every init page in a shuffled order, then unmaps the freed
    share; each request touches the same fixed subset of surviving pages and
    the same share of the file-backed pages.
    """
    rng = random.Random(config.seed)
    surviving = config.surviving_pages
    freed = config.freed_after_init_pages
    nfile = config.file_backed_pages

    files: list[bytes] = []
    init: list[TraceOp] = [MapRegion("heap", surviving)] if surviving else []
    if freed:
        init.append(MapRegion("scratch", freed))
    if nfile:
        data = rng.randbytes(nfile * PAGE_SIZE)
        files.append(data)
        init.append(MapRegion("lib", nfile, "file", content_id(data)))

    writes = [Touch("heap", p, "write") for p in range(surviving)]
    writes += [Touch("scratch", p, "write") for p in range(freed)]
    rng.shuffle(writes)
    init += writes
    init += [Touch("lib", p, "read") for p in range(nfile)]
    if freed:
        init.append(Unmap("scratch"))

    heap_ws = rng.sample(range(surviving), working_set_size(config.working_set_fraction, surviving))
    file_ws = rng.sample(range(nfile), working_set_size(config.working_set_fraction, nfile))
    request = [Touch("heap", p, "read") for p in heap_ws]
    request += [Touch("lib", p, "read") for p in file_ws]
    rng.shuffle(request)
    return Workload(config.name, init, request, config.request_compute_cost, files)
