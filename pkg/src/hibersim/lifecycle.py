"""Container lifecycle with the Hibernate states.

Nine edges are legal::

    1 Cold      --request--> Warm              (cold start)
    2 Warm      --request--> Running
    3 Running   --done-----> Warm
    4 Warm      --STOP-----> Hibernate         (deflate)
    5 Hibernate --CONT-----> WokenUp           (anticipatory wake)
    6 WokenUp   --request--> HibernateRunning
    7 Hibernate --request--> HibernateRunning  (wake on request)
    8 HibernateRunning --done--> WokenUp
    9 WokenUp   --STOP-----> Hibernate         (deflate again)

Signals are plain method calls.  A hibernated sandbox waits for a request
without consuming compute; the request itself unblocks it.
"""

from __future__ import annotations

import enum
import itertools
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional, Sequence

from .errors import AuditError, IllegalTransition
from .guest_memory import GuestMemory
from .host_model import HostMemory, StorageModel
from .page_allocator import Allocator, HeapSource, control_page_of
from .swap_manager import SwapManager
from .trace import MapRegion, Touch, TraceOp, TraceResult, TraceRunner, Workload


class ContainerState(enum.Enum):
    COLD = "cold"
    WARM = "warm"
    RUNNING = "running"
    HIBERNATE = "hibernate"
    HIBERNATE_RUNNING = "hibernate-running"
    WOKEN_UP = "woken-up"


class Trigger(enum.Enum):
    STOP = "STOP"
    CONT = "CONT"
    REQUEST = "request"
    DONE = "done"


S, T = ContainerState, Trigger

TRANSITIONS: dict[tuple[ContainerState, Trigger], tuple[int, ContainerState]] = {
    (S.COLD, T.REQUEST): (1, S.WARM),
    (S.WARM, T.REQUEST): (2, S.RUNNING),
    (S.RUNNING, T.DONE): (3, S.WARM),
    (S.WARM, T.STOP): (4, S.HIBERNATE),
    (S.HIBERNATE, T.CONT): (5, S.WOKEN_UP),
    (S.WOKEN_UP, T.REQUEST): (6, S.HIBERNATE_RUNNING),
    (S.HIBERNATE, T.REQUEST): (7, S.HIBERNATE_RUNNING),
    (S.HIBERNATE_RUNNING, T.DONE): (8, S.WOKEN_UP),
    (S.WOKEN_UP, T.STOP): (9, S.HIBERNATE),
}


def transition(state: ContainerState, trigger: Trigger) -> ContainerState:
    try:
        return TRANSITIONS[state, trigger][1]
    except KeyError:
        raise IllegalTransition(f"{trigger.value} is not allowed in state {state.value}") from None


@dataclass(frozen=True)
class LifecycleConfig:
    cold_start_runtime_cost: float = 0.1
    unblock_cost: float = 0.0
    on_busy: Literal["reject", "queue"] = "reject"


@dataclass(frozen=True)
class DeflationReport:
    reclaimed: int
    swapped: int
    file_released: int
    mode: Literal["pagefault", "reap"]


@dataclass(frozen=True)
class RequestResult:
    latency: float
    swap_faults: int
    pages_prefetched: int
    state_path: tuple[ContainerState, ...]
    accesses: int = 0


@dataclass
class SandboxMetrics:
    compute_ticks: int = 0
    requests: int = 0
    cold_start_latency: float = 0.0
    deflations: list[DeflationReport] = field(default_factory=list)
    state_path: list[ContainerState] = field(default_factory=list)


_ids = itertools.count(1)


class Sandbox:
    """One container sandbox: guest memory, swap state, lifecycle state."""

    def __init__(
        self,
        workload: Workload,
        *,
        sandbox_id: Optional[str] = None,
        host: Optional[HostMemory] = None,
        storage: Optional[StorageModel] = None,
        config: Optional[LifecycleConfig] = None,
        workdir: Optional[Path] = None,
        heap: Optional[HeapSource] = None,
    ) -> None:
        self.id = sandbox_id or f"sandbox-{os.getpid()}-{next(_ids)}"
        self.workload = workload
        self.host = host if host is not None else HostMemory()
        self.storage = storage if storage is not None else StorageModel()
        self.config = config if config is not None else LifecycleConfig()
        self._tmp = None
        if workdir is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="hibersim-")
            workdir = Path(self._tmp.name)
        self.guest = GuestMemory(self.host, Allocator(heap, host=self.host))
        self.swap = SwapManager(self.id, self.guest, workdir, self.storage)
        self.runner = TraceRunner(self.guest)
        self.state = ContainerState.COLD
        self.paused = False
        self.metrics = SandboxMetrics(state_path=[ContainerState.COLD])
        self.audit_enabled = os.environ.get("HIBERSIM_AUDIT") == "1"
        self._pending: list[Sequence[Touch]] = []
        for data in workload.files:
            self.guest.files.add(data)

    # -- state machine ----------------------------------------------------------

    def _fire(self, trigger: Trigger) -> ContainerState:
        self.state = transition(self.state, trigger)
        self.metrics.state_path.append(self.state)
        return self.state

    def _check(self, trigger: Trigger) -> None:
        transition(self.state, trigger)

    # -- operations -------------------------------------------------------------

    def run_init(self) -> TraceResult:
        """Cold start: run the init trace and move Cold -> Warm."""
        self._check(Trigger.REQUEST)
        result = self.runner.run(self.workload.init_trace)
        self.metrics.compute_ticks += result.accesses
        committed = self.host.footprint_pages - len(self.guest.allocator.control_pages())
        # nothing is in memory yet: the initialized image is demand-loaded from storage
        self.metrics.cold_start_latency = self.config.cold_start_runtime_cost + self.storage.read_latency(
            committed, "random"
        )
        self._fire(Trigger.REQUEST)
        self._audit()
        return result

    def deliver_signal(self, sig: Literal["STOP", "CONT"], host: Optional[HostMemory] = None) -> ContainerState:
        trigger = Trigger(sig)
        self._check(trigger)
        if trigger is Trigger.STOP:
            self.deflate(host)
        else:
            self.inflate(host)
            self._fire(Trigger.CONT)
        self._audit()
        return self.state

    def inflate(self, host: Optional[HostMemory] = None) -> int:
        """Eager part of waking: REAP prefetch when the sandbox was REAP-deflated."""
        prefetched = 0
        if self.swap.reap_deflated:
            prefetched = self.swap.reap_swap_in(host).pages_read
        self.paused = False
        return prefetched

    def deflate(self, host: Optional[HostMemory] = None) -> DeflationReport:
        """STOP handling: pause, reclaim, swap out, drop file-backed pages."""
        self._check(Trigger.STOP)
        host = host if host is not None else self.host
        before = set(host.committed)
        self.paused = True
        blocks_before = set(self.guest.allocator.blocks)
        try:
            reclaimed = self.guest.allocator.reclaim_free_pages(host)
            use_reap = self.swap.manifest is not None and self.swap.manifest.recorded
            if use_reap:
                swapped = self.swap.reap_swap_out(host)
            else:
                swapped = self.swap.swap_out(host).pages_written
            released = sum(
                self.guest.release_file_backed(space, host) for space in self.guest.spaces.values()
            )
        except Exception:
            returned = blocks_before - set(self.guest.allocator.blocks)
            for page in sorted(before - set(host.committed)):
                if control_page_of(page) not in returned:
                    host.commit(page)
            self.paused = False
            raise
        report = DeflationReport(reclaimed, swapped, released, "reap" if use_reap else "pagefault")
        self.metrics.deflations.append(report)
        self._fire(Trigger.STOP)
        self.swap.hibernated()
        return report

    def submit_request(
        self,
        trace: Optional[Sequence[Touch]] = None,
        host: Optional[HostMemory] = None,
        *,
        record: bool = False,
    ) -> Optional[RequestResult]:
        """Serve one request.  Returns None when it was queued behind a busy sandbox."""
        trace = self.workload.request_trace if trace is None else trace
        if self.state in (ContainerState.RUNNING, ContainerState.HIBERNATE_RUNNING):
            if self.config.on_busy == "queue":
                self._pending.append(trace)
                return None
            raise IllegalTransition(f"sandbox busy in state {self.state.value}")
        if self.state is ContainerState.COLD:
            raise IllegalTransition("a cold sandbox starts through cold_start()")
        self._check(Trigger.REQUEST)
        path = [self.state]
        latency = 0.0
        prefetched = 0
        faults_before = self.swap.stats.swap_faults
        latency_before = self.swap.stats.swap_fault_latency
        if self.state is ContainerState.HIBERNATE:
            latency += self.config.unblock_cost
            prefetched_before = self.swap.stats.prefetch_latency
            prefetched = self.inflate(host)
            latency += self.swap.stats.prefetch_latency - prefetched_before
        path.append(self._fire(Trigger.REQUEST))
        if record:
            _, result = self.swap.reap_record(lambda: self.runner.run(trace))
        else:
            result = self.runner.run(trace)
        self.metrics.compute_ticks += result.accesses
        self.metrics.requests += 1
        latency += self.swap.stats.swap_fault_latency - latency_before
        latency += self.workload.request_compute_cost
        path.append(self._fire(Trigger.DONE))
        self._audit()
        out = RequestResult(
            latency=latency,
            swap_faults=self.swap.stats.swap_faults - faults_before,
            pages_prefetched=prefetched,
            state_path=tuple(path),
            accesses=result.accesses,
        )
        while self._pending:
            self.submit_request(self._pending.pop(0), host)
        return out

    def terminate(self) -> None:
        for space in list(self.guest.spaces.values()):
            self.guest.drop_space(space)
        self.swap.close()
        if self._tmp is not None:
            self._tmp.cleanup()
            self._tmp = None

    # -- accounting -----------------------------------------------------------------

    def anonymous_committed_pages(self) -> int:
        return self.host.committed_in(self.guest.anonymous_pages(present_only=False))

    def file_committed_pages(self) -> int:
        return self.host.committed_in(self.guest.file_pages())

    def control_pages(self) -> int:
        return len(self.guest.allocator.control_pages())

    def _audit(self) -> None:
        if self.audit_enabled:
            self.audit()

    def audit(self) -> None:
        self.guest.allocator.audit()
        self.guest.audit()
        if self.paused != (self.state is ContainerState.HIBERNATE):
            raise AuditError(f"paused={self.paused} in state {self.state.value}")
        if self.state is ContainerState.HIBERNATE:
            if self.anonymous_committed_pages():
                raise AuditError("hibernated sandbox still commits anonymous pages")
            expected = self.control_pages()
            if self.host.footprint_pages != expected:
                raise AuditError(
                    f"hibernate footprint {self.host.footprint_pages} pages, expected {expected}"
                )
        for _, vaddr, pte in self.guest.walk():
            if pte.swapped_out and pte.phys not in self.swap.index:
                raise AuditError(f"swapped PTE {vaddr:#x} has no swap index entry")
            if pte.present and not self.swap.reap_deflated and not self.host.is_committed(pte.phys):
                raise AuditError(f"present PTE {vaddr:#x} has no host backing")


def cold_start(workload: Workload, **kwargs) -> Sandbox:
    """Create a sandbox and initialize it; it ends in Warm."""
    sandbox = Sandbox(workload, **kwargs)
    sandbox.run_init()
    return sandbox


def simple_workload(
    init_pages: int,
    request_pages: Optional[Sequence[int]] = None,
    compute_cost: float = 0.0,
    name: str = "simple",
) -> Workload:
    """One anonymous region of ``init_pages`` pages written by init."""
    init: list[TraceOp] = []
    if init_pages:
        init.append(MapRegion("heap", init_pages))
        init += [Touch("heap", p, "write") for p in range(init_pages)]
    pages = range(init_pages) if request_pages is None else request_pages
    return Workload(name, init, [Touch("heap", p, "read") for p in pages], compute_cost)


__all__ = [
    "ContainerState",
    "DeflationReport",
    "LifecycleConfig",
    "RequestResult",
    "Sandbox",
    "SandboxMetrics",
    "TRANSITIONS",
    "Trigger",
    "cold_start",
    "simple_workload",
    "transition",
]
