import itertools

import pytest

from hibersim.errors import AuditError, IllegalTransition, SwapIOError
from hibersim.host_model import StorageModel
from hibersim.lifecycle import (
    TRANSITIONS,
    ContainerState as S,
    LifecycleConfig,
    Sandbox,
    Trigger as T,
    cold_start,
    simple_workload,
    transition,
)
from hibersim.trace import MapRegion, Touch, Unmap, Workload

FIGURE = {
    1: ("cold", "request", "warm"),
    2: ("warm", "request", "running"),
    3: ("running", "done", "warm"),
    4: ("warm", "STOP", "hibernate"),
    5: ("hibernate", "CONT", "woken-up"),
    6: ("woken-up", "request", "hibernate-running"),
    7: ("hibernate", "request", "hibernate-running"),
    8: ("hibernate-running", "done", "woken-up"),
    9: ("woken-up", "STOP", "hibernate"),
}


@pytest.fixture
def make(tmp_path):
    made = []

    def _make(workload, **kw):
        kw.setdefault("workdir", tmp_path / f"sb{len(made)}")
        sb = cold_start(workload, sandbox_id=f"sb{len(made)}", **kw)
        made.append(sb)
        return sb

    yield _make
    for sb in made:
        sb.terminate()


# -- state machine ---------------------------------------------------------------


def test_exactly_nine_edges():
    assert len(TRANSITIONS) == 9
    table = {(s.value, t.value): (n, d.value) for (s, t), (n, d) in TRANSITIONS.items()}
    assert table == {(a, b): (n, c) for n, (a, b, c) in FIGURE.items()}


@pytest.mark.parametrize("state, trigger", list(itertools.product(S, T)))
def test_transition_relation(state, trigger):
    legal = {(a, b): c for a, b, c in FIGURE.values()}
    key = (state.value, trigger.value)
    if key in legal:
        assert transition(state, trigger).value == legal[key]
    else:
        with pytest.raises(IllegalTransition):
            transition(state, trigger)


def _sandbox_in(make, state):
    sb = make(simple_workload(8, range(4)))
    if state in (S.HIBERNATE, S.WOKEN_UP):
        sb.deliver_signal("STOP")
        if state is S.WOKEN_UP:
            sb.deliver_signal("CONT")
    elif state in (S.RUNNING, S.HIBERNATE_RUNNING):
        # mid-request states are only observable from inside a request
        sb.state = state
    return sb


@pytest.mark.parametrize("state", [s for s in S if s is not S.COLD])
@pytest.mark.parametrize("action", ["STOP", "CONT", "request"])
def test_sandbox_rejects_illegal_edges(make, state, action):
    sb = _sandbox_in(make, state)
    if (state.value, action) in {(a, b) for a, b, _ in FIGURE.values()}:
        return
    with pytest.raises(IllegalTransition):
        if action == "request":
            sb.submit_request()
        else:
            sb.deliver_signal(action)
    assert sb.state is state


def test_cold_sandbox_rejects_everything(tmp_path):
    sb = Sandbox(simple_workload(4), workdir=tmp_path)
    for action in (lambda: sb.deliver_signal("STOP"), lambda: sb.deliver_signal("CONT"), sb.submit_request):
        with pytest.raises(IllegalTransition):
            action()
    assert sb.state is S.COLD
    sb.terminate()


def test_hibernate_running_rejects_stop(make):
    sb = _sandbox_in(make, S.HIBERNATE_RUNNING)
    with pytest.raises(IllegalTransition):
        sb.deliver_signal("STOP")


# -- cold start ------------------------------------------------------------------


def test_cold_start_commits_init_pages(make):
    sb = make(simple_workload(100))
    assert sb.state is S.WARM
    assert sb.anonymous_committed_pages() == 100
    assert sb.host.footprint_pages == 100 + sb.control_pages()


def test_cold_start_empty_init(make):
    sb = make(simple_workload(0))
    assert sb.state is S.WARM
    assert sb.host.footprint_pages == 0
    assert sb.guest.allocator.allocated_count() == 0


def test_cold_request_slower_than_warm(make):
    sb = make(simple_workload(50, compute_cost=0.002))
    first = sb.submit_request()
    cold = sb.metrics.cold_start_latency + first.latency
    warm = sb.submit_request()
    assert cold > warm.latency
    assert sb.metrics.cold_start_latency == pytest.approx(
        0.1 + StorageModel().read_latency(50, "random"), rel=1e-12
    )


# -- signals ---------------------------------------------------------------------


def test_stop_empties_anonymous_memory(make):
    sb = make(simple_workload(64))
    assert sb.deliver_signal("STOP") is S.HIBERNATE
    assert sb.paused
    assert sb.anonymous_committed_pages() == 0
    assert sb.host.footprint_pages == sb.control_pages()
    sb.audit()


def test_cont_with_manifest_prefetches(make):
    sb = make(simple_workload(30, range(12)))
    sb.deliver_signal("STOP")
    sb.submit_request(record=True)
    sb.deliver_signal("STOP")
    assert sb.metrics.deflations[-1].mode == "reap"
    assert sb.deliver_signal("CONT") is S.WOKEN_UP
    manifest = sb.swap.manifest.gpas
    assert len(manifest) == 12
    assert all(sb.host.is_committed(g) for g in manifest)
    assert sb.submit_request().swap_faults == 0


def test_cont_without_manifest_is_lazy(make):
    sb = make(simple_workload(10))
    sb.deliver_signal("STOP")
    sb.deliver_signal("CONT")
    assert sb.anonymous_committed_pages() == 0
    assert not sb.paused


def test_stop_while_running_keeps_state(make):
    sb = _sandbox_in(make, S.RUNNING)
    with pytest.raises(IllegalTransition):
        sb.deliver_signal("STOP")
    assert sb.state is S.RUNNING


# -- requests ----------------------------------------------------------------------


def test_warm_request_has_no_fault_latency(make):
    sb = make(simple_workload(20, range(20), compute_cost=0.01))
    res = sb.submit_request()
    assert res.swap_faults == 0 and res.latency == 0.01
    assert res.state_path == (S.WARM, S.RUNNING, S.WARM)


def test_hibernate_request_pays_random_reads(make):
    sb = make(simple_workload(100, range(40), compute_cost=0.005))
    warm = sb.submit_request()
    sb.deliver_signal("STOP")
    first = sb.submit_request()
    assert first.state_path == (S.HIBERNATE, S.HIBERNATE_RUNNING, S.WOKEN_UP)
    assert first.swap_faults == 40
    assert first.latency == pytest.approx(0.005 + StorageModel().read_latency(40, "random"), rel=1e-12)
    second = sb.submit_request()
    assert second.state_path == (S.WOKEN_UP, S.HIBERNATE_RUNNING, S.WOKEN_UP)
    assert second.swap_faults == 0
    assert second.latency == pytest.approx(warm.latency)


def test_unblock_cost_added_on_hibernate_request(make):
    sb = make(simple_workload(4, []), config=LifecycleConfig(unblock_cost=0.003))
    sb.deliver_signal("STOP")
    assert sb.submit_request().latency == pytest.approx(0.003)


def test_queue_mode_drains_after_request(make):
    sb = make(simple_workload(4, [0]), config=LifecycleConfig(on_busy="queue"))
    sb.state = S.RUNNING
    assert sb.submit_request() is None
    sb.state = S.WARM
    sb.submit_request()
    assert sb.metrics.requests == 2
    assert sb.state is S.WARM


# -- deflation ---------------------------------------------------------------------


def _fixture_workload():
    data = bytes(range(256)) * 160
    from hibersim.guest_memory import content_id

    fid = content_id(data)
    init = [MapRegion("heap", 50), MapRegion("scratch", 20), MapRegion("lib", 10, "file", fid)]
    init += [Touch("heap", p, "write") for p in range(50)]
    init += [Touch("scratch", p, "write") for p in range(20)]
    init += [Touch("lib", p) for p in range(10)]
    init.append(Unmap("scratch"))
    return Workload("fixture", init, [Touch("heap", 0)], files=[data])


def test_deflate_report_counts(make):
    sb = make(_fixture_workload())
    sb.deliver_signal("STOP")
    report = sb.metrics.deflations[-1]
    assert (report.reclaimed, report.swapped, report.file_released) == (20, 50, 10)
    assert report.mode == "pagefault"
    assert sb.host.footprint_pages == sb.control_pages()


def test_deflate_from_hibernate_is_illegal(make):
    sb = make(simple_workload(5))
    sb.deliver_signal("STOP")
    with pytest.raises(IllegalTransition):
        sb.deflate()
    assert len(sb.metrics.deflations) == 1


def test_reap_deflate_leaves_ptes(make):
    sb = make(simple_workload(20, range(5)))
    sb.deliver_signal("STOP")
    sb.submit_request(record=True)
    ptes = {v: (p.present, p.swapped_out, p.phys) for _, v, p in sb.guest.walk()}
    sb.deliver_signal("STOP")
    assert {v: (p.present, p.swapped_out, p.phys) for _, v, p in sb.guest.walk()} == ptes
    assert sb.anonymous_committed_pages() == 0
    sb.audit()


def test_deflate_rolls_back_on_failure(make, monkeypatch):
    sb = make(_fixture_workload())
    before = set(sb.host.committed)
    ptes = {v: (p.present, p.swapped_out) for _, v, p in sb.guest.walk()}

    def boom(host=None):
        raise SwapIOError("disk full")

    monkeypatch.setattr(sb.swap, "swap_out", boom)
    with pytest.raises(SwapIOError):
        sb.deliver_signal("STOP")
    assert sb.state is S.WARM and not sb.paused
    assert set(sb.host.committed) == before
    assert {v: (p.present, p.swapped_out) for _, v, p in sb.guest.walk()} == ptes
    assert sb.metrics.deflations == []


def test_hibernate_consumes_no_compute(make):
    sb = make(simple_workload(10, range(10)))
    sb.submit_request()
    ticks = sb.metrics.compute_ticks
    sb.deliver_signal("STOP")
    sb.deliver_signal("CONT")
    sb.deliver_signal("STOP")
    assert sb.metrics.compute_ticks == ticks


def test_repeated_hibernation_cycles(make):
    sb = make(simple_workload(30, range(0, 30, 3)))
    for _ in range(4):
        sb.deliver_signal("STOP")
        sb.audit()
        sb.submit_request()
        sb.audit()
    assert sb.swap.index.records() == 30


def test_determinism(tmp_path):
    def run(tag):
        sb = cold_start(simple_workload(40, range(0, 40, 2), 0.001), sandbox_id="d", workdir=tmp_path / tag)
        out = [sb.submit_request()]
        sb.deliver_signal("STOP")
        out.append(sb.submit_request(record=True))
        sb.deliver_signal("STOP")
        sb.deliver_signal("CONT")
        out.append(sb.submit_request())
        path = list(sb.metrics.state_path)
        sb.terminate()
        return out, path

    assert run("a") == run("b")


def test_audit_env_checks_every_operation(make, monkeypatch):
    monkeypatch.setenv("HIBERSIM_AUDIT", "1")
    sb = make(simple_workload(6))
    assert sb.audit_enabled
    sb.paused = True
    with pytest.raises(AuditError):
        sb.submit_request()


def test_terminate_removes_files(tmp_path):
    sb = cold_start(simple_workload(5), sandbox_id="t", workdir=tmp_path)
    sb.deliver_signal("STOP")
    assert sb.swap.index.path.exists()
    sb.terminate()
    assert list(tmp_path.iterdir()) == []
