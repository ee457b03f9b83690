import pytest
from hypothesis import given, strategies as st

from hibersim.host_model import BLOCK_SIZE, PAGE_SIZE, HostMemory, StorageModel

from .oracles import random_read_seconds, sequential_read_seconds

P = 0x40_0000


def test_commit_fresh_page_is_zero(host):
    assert host.commit(P) == bytes(PAGE_SIZE)
    assert host.committed == {P}


def test_commit_is_idempotent(host):
    host.commit(P)[:] = b"\xab" * PAGE_SIZE
    assert host.commit(P) == b"\xab" * PAGE_SIZE
    assert host.commit_count == 1


def test_decommit_then_commit_zero_fills(host):
    host.write(P, b"\x11" * 64)
    assert host.decommit(P, P + PAGE_SIZE) == 1
    assert host.commit(P) == bytes(PAGE_SIZE)


def test_decommit_counts_only_committed(host):
    for i in (0, 1, 3):
        host.commit(P + i * PAGE_SIZE)
    assert host.decommit(P, P + 4 * PAGE_SIZE) == 3
    assert host.decommit_count == 3


def test_decommit_empty_range(host):
    host.commit(P)
    assert host.decommit(P, P) == 0
    assert host.footprint_pages == 1


def test_decommit_whole_block(host):
    for i in range(1024):
        host.commit(P + i * PAGE_SIZE)
    before = host.footprint_bytes
    assert host.decommit(P, P + BLOCK_SIZE) == 1024
    assert before - host.footprint_bytes == 4 * 1024 * 1024
    assert host.footprint_pages == len(host.committed) == 0


def test_decommit_requires_alignment(host):
    with pytest.raises(ValueError):
        host.decommit(P + 1, P + PAGE_SIZE)


def test_write_cannot_cross_page(host):
    with pytest.raises(ValueError):
        host.write(P, b"x" * 10, offset=PAGE_SIZE - 5)


@given(
    st.lists(
        st.tuples(st.sampled_from(["commit", "decommit"]), st.integers(0, 15), st.integers(1, 4)),
        max_size=60,
    )
)
def test_cardinality_tracks_state_changes(ops):
    host = HostMemory()
    model: set[int] = set()
    changed_commits = changed_decommits = 0
    for op, start, n in ops:
        if op == "commit":
            page = start * PAGE_SIZE
            changed_commits += page not in model
            model.add(page)
            host.commit(page)
        else:
            rng = {p * PAGE_SIZE for p in range(start, start + n)}
            expect = len(model & rng)
            changed_decommits += expect
            model -= rng
            assert host.decommit(start * PAGE_SIZE, (start + n) * PAGE_SIZE) == expect
    assert host.committed == model
    assert host.footprint_pages == changed_commits - changed_decommits
    assert host.commit_count == changed_commits


@given(st.binary(min_size=1, max_size=PAGE_SIZE))
def test_content_round_trip_until_decommit(data):
    host = HostMemory()
    host.write(P, data)
    assert host.read(P)[: len(data)] == data
    host.decommit_page(P)
    assert host.read(P) == bytes(PAGE_SIZE)


def test_read_latency_empty():
    assert StorageModel().read_latency(0, "random") == 0


def test_read_latency_random_defaults():
    # 100 MB/s random 4K reads plus a 15 us guest/host switch per page
    assert StorageModel().read_latency(1024, "random") == pytest.approx(0.0573, abs=5e-5)
    assert StorageModel().read_latency(1024, "random") == pytest.approx(random_read_seconds(1024), rel=1e-12)


def test_read_latency_sequential_defaults():
    assert StorageModel().read_latency(1024, "sequential") == pytest.approx(
        sequential_read_seconds(1024), rel=1e-12
    )
    assert StorageModel().read_latency(1024, "sequential") == pytest.approx(0.0042, abs=5e-5)


@given(st.integers(1, 10**6))
def test_sequential_beats_random(n):
    s = StorageModel()
    assert s.read_latency(n, "sequential") < s.read_latency(n, "random")


@pytest.mark.parametrize(
    "kwargs",
    [
        {"random_read_bps": 0},
        {"random_read_bps": 2e9},
        {"guest_host_switch_cost": -1},
    ],
)
def test_storage_model_rejects_bad_parameters(kwargs):
    with pytest.raises(ValueError):
        StorageModel(**kwargs)


def test_read_latency_rejects_bad_input():
    with pytest.raises(ValueError):
        StorageModel().read_latency(-1, "random")
    with pytest.raises(ValueError):
        StorageModel().read_latency(1, "strided")
