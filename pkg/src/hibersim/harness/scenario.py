"""Canonical cold -> warm -> hibernate -> woken-up measurement run."""

from __future__ import annotations

import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Optional

from ..errors import AuditError
from ..host_model import PAGE_SIZE
from ..lifecycle import ContainerState, LifecycleConfig, RequestResult, Sandbox
from .config import MODES, PSS_INSTANCES, RUNTIME_OVERHEAD_PAGES, Mode, ScenarioConfig
from .workload import build_workload

STATES = ("cold", "warm", "hibernate", "wokenup")
METRICS = (
    "committed_pages",
    "anon_committed_pages",
    "control_pages",
    "footprint_bytes",
    "response_latency",
    "swap_in_latency",
    "swap_faults",
    "pages_prefetched",
)
OVERHEAD_BYTES = RUNTIME_OVERHEAD_PAGES * PAGE_SIZE // PSS_INSTANCES

MODEL_NOTES = (
    "Latencies cover modeled components only: swap reads, guest/host switches, "
    "request compute and cold-start boot/image load; no HTTP stack.",
    f"Footprint adds a shared runtime binary of {RUNTIME_OVERHEAD_PAGES} pages "
    f"amortized over {PSS_INSTANCES} instances (PSS model).",
)


@dataclass
class StateMetrics:
    committed_pages: int = 0
    anon_committed_pages: int = 0
    control_pages: int = 0
    footprint_bytes: int = 0
    response_latency: float = 0.0
    swap_in_latency: float = 0.0
    swap_faults: int = 0
    pages_prefetched: int = 0


@dataclass
class ScenarioReport:
    name: str
    mode: Mode
    seed: int
    config: dict[str, Any]
    states: dict[str, StateMetrics]
    ratios: dict[str, float]
    deflation: dict[str, int]
    state_path: list[str]
    model: dict[str, Any] = field(
        default_factory=lambda: {
            "runtime_overhead_pages": RUNTIME_OVERHEAD_PAGES,
            "pss_instances": PSS_INSTANCES,
            "overhead_bytes": OVERHEAD_BYTES,
            "page_size": PAGE_SIZE,
            "notes": list(MODEL_NOTES),
        }
    )

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ScenarioReport":
        fields_ = dict(data)
        fields_["states"] = {k: StateMetrics(**v) for k, v in data["states"].items()}
        return cls(**fields_)


@dataclass
class ComparisonReport:
    pagefault: ScenarioReport
    reap: ScenarioReport
    hibernate_latency_ratio: float
    swap_in_latency_ratio: Optional[float]

    def to_dict(self) -> dict[str, Any]:
        return {
            "pagefault": self.pagefault.to_dict(),
            "reap": self.reap.to_dict(),
            "hibernate_latency_ratio": self.hibernate_latency_ratio,
            "swap_in_latency_ratio": self.swap_in_latency_ratio,
        }


def footprint_ratio(report: ScenarioReport, state: str) -> Fraction:
    return Fraction(report.states[state].footprint_bytes, report.states["warm"].footprint_bytes)


def compute_ratios(states: dict[str, StateMetrics]) -> dict[str, float]:
    warm = states["warm"].footprint_bytes
    cold = states["cold"].response_latency
    return {
        "hibernate_over_warm_footprint": states["hibernate"].footprint_bytes / warm,
        "wokenup_over_warm_footprint": states["wokenup"].footprint_bytes / warm,
        "hibernate_latency_over_cold": states["hibernate"].response_latency / cold if cold else 0.0,
    }


def _memory(sandbox: Sandbox, into: StateMetrics) -> None:
    into.committed_pages = sandbox.host.footprint_pages
    into.anon_committed_pages = sandbox.anonymous_committed_pages()
    into.control_pages = sandbox.control_pages()
    into.footprint_bytes = into.committed_pages * PAGE_SIZE + OVERHEAD_BYTES


def _latency(result: RequestResult, swap_in: float, into: StateMetrics) -> None:
    into.response_latency = result.latency
    into.swap_in_latency = swap_in
    into.swap_faults = result.swap_faults
    into.pages_prefetched = result.pages_prefetched


def run_scenario(
    config: ScenarioConfig,
    mode: Optional[Mode] = None,
    seed: Optional[int] = None,
    workdir: Optional[Path] = None,
) -> ScenarioReport:
    """Run the measurement sequence and return the report.

    In REAP mode a sample request is recorded after a first page-fault
    hibernation; the measured hibernation then uses the REAP path.
    """
    config = config.replace(
        mode=mode or config.mode, seed=config.seed if seed is None else seed
    )
    workload = build_workload(config)
    lifecycle = LifecycleConfig(cold_start_runtime_cost=config.cold_start_runtime_cost)
    states = {s: StateMetrics() for s in STATES}
    with tempfile.TemporaryDirectory(prefix="hibersim-", dir=workdir) as tmp:
        sandbox = Sandbox(
            workload,
            sandbox_id=f"{config.name}-{config.mode}",
            storage=config.storage(),
            config=lifecycle,
            workdir=Path(tmp),
        )
        try:
            sandbox.run_init()
            first = sandbox.submit_request()
            _latency(first, 0.0, states["cold"])
            states["cold"].response_latency = sandbox.metrics.cold_start_latency + first.latency
            _memory(sandbox, states["cold"])

            warm = [sandbox.submit_request() for _ in range(config.repetitions)]
            _latency(warm[-1], 0.0, states["warm"])
            states["warm"].response_latency = sum(r.latency for r in warm) / len(warm)
            _memory(sandbox, states["warm"])

            if config.mode == "reap":
                sandbox.deliver_signal("STOP")
                sandbox.submit_request(record=True)

            sandbox.deliver_signal("STOP")
            deflation = sandbox.metrics.deflations[-1]
            _memory(sandbox, states["hibernate"])
            _check_hibernate(sandbox, states["hibernate"])

            stats = sandbox.swap.stats
            swap_before = stats.swap_fault_latency + stats.prefetch_latency
            wake = sandbox.submit_request()
            swap_in = stats.swap_fault_latency + stats.prefetch_latency - swap_before
            _latency(wake, swap_in, states["hibernate"])

            swap_before = stats.swap_fault_latency + stats.prefetch_latency
            again = sandbox.submit_request()
            swap_in = stats.swap_fault_latency + stats.prefetch_latency - swap_before
            _latency(again, swap_in, states["wokenup"])
            _memory(sandbox, states["wokenup"])
            state_path = [s.value for s in sandbox.metrics.state_path]
        finally:
            sandbox.terminate()

    report = ScenarioReport(
        name=config.name,
        mode=config.mode,
        seed=config.seed,
        config=config.to_dict(),
        states=states,
        ratios=compute_ratios(states),
        deflation={
            "reclaimed": deflation.reclaimed,
            "swapped": deflation.swapped,
            "file_released": deflation.file_released,
        },
        state_path=state_path,
    )
    audit_report(report)
    return report


def _check_hibernate(sandbox: Sandbox, metrics: StateMetrics) -> None:
    if sandbox.state is not ContainerState.HIBERNATE:
        raise AuditError(f"expected Hibernate, sandbox is {sandbox.state.value}")
    if metrics.anon_committed_pages:
        raise AuditError(f"{metrics.anon_committed_pages} anonymous pages committed in Hibernate")
    if metrics.committed_pages != metrics.control_pages:
        raise AuditError("Hibernate footprint holds more than control pages")


def audit_report(report: ScenarioReport) -> None:
    """Raise :class:`AuditError` unless counts are sane and ratios derive from raw fields."""
    for state, m in report.states.items():
        for name, value in asdict(m).items():
            if value < 0:
                raise AuditError(f"{state}.{name} is negative")
        if m.footprint_bytes != m.committed_pages * PAGE_SIZE + report.model["overhead_bytes"]:
            raise AuditError(f"{state} footprint does not match its page count")
    if compute_ratios(report.states) != report.ratios:
        raise AuditError("ratios are not derived from the state fields")


def compare_modes(
    config: ScenarioConfig, parallel: int = 1, workdir: Optional[Path] = None
) -> ComparisonReport:
    """Same config and seed under both swap-in modes."""
    with ThreadPoolExecutor(max_workers=max(1, parallel)) as pool:
        pf, reap = pool.map(lambda m: run_scenario(config, mode=m, workdir=workdir), MODES)
    pf_swap = pf.states["hibernate"].swap_in_latency
    reap_swap = reap.states["hibernate"].swap_in_latency
    return ComparisonReport(
        pagefault=pf,
        reap=reap,
        hibernate_latency_ratio=pf.states["hibernate"].response_latency
        / reap.states["hibernate"].response_latency,
        swap_in_latency_ratio=pf_swap / reap_swap if reap_swap else None,
    )
