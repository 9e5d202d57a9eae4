import numpy as np
import pytest

from ringsync.collectives import allreduce_cluster, comm_volume_ps, comm_volume_ring
from ringsync.core import ClusterConfig, partition
from ringsync.transport import ProtocolError

STRATEGIES = ["ring", "ps"]


def direct_sum(buffers):
    total = np.zeros(len(buffers[0]))
    for b in buffers:
        total = total + b
    return total


def rel_err(got, want):
    scale = max(np.max(np.abs(want), initial=0.0), 1e-300)
    return np.max(np.abs(got - want), initial=0.0) / scale


def walked_ring_traffic(k, n):
    """Elements sent per rank, counted by walking the chunk index.

    Each rank starts scatter at its own chunk and gather at the next one,
    stepping one chunk backwards per round.
    """
    sizes = partition(k, n).sizes
    sent = []
    for rank in range(n):
        total = 0
        chunk = rank
        for _ in range(n - 1):
            total += sizes[chunk]
            chunk = (chunk - 1) % n
        chunk = (rank + 1) % n
        for _ in range(n - 1):
            total += sizes[chunk]
            chunk = (chunk - 1) % n
        sent.append(total)
    return sent


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_one_hot_inputs(strategy):
    bufs = [np.eye(3)[i] for i in range(3)]
    outs, _ = allreduce_cluster(bufs, ClusterConfig(3, strategy))
    for out in outs:
        assert out.tolist() == [1.0, 1.0, 1.0]


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_seeded_random_matches_direct_sum(strategy, rng):
    bufs = [rng.standard_normal(8) for _ in range(4)]
    outs, _ = allreduce_cluster(bufs, ClusterConfig(4, strategy))
    want = direct_sum(bufs)
    for out in outs:
        assert rel_err(out, want) <= 1e-12
        assert np.array_equal(out, outs[0])


def test_ring_and_ps_agree(rng):
    bufs = [rng.standard_normal(8) for _ in range(4)]
    ring, _ = allreduce_cluster(bufs, ClusterConfig(4, "ring"))
    ps, _ = allreduce_cluster(bufs, ClusterConfig(4, "ps"))
    assert rel_err(ring[0], ps[0]) <= 1e-12


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_single_worker_is_identity(strategy, rng):
    buf = rng.standard_normal(5)
    outs, ledger = allreduce_cluster([buf], ClusterConfig(1, strategy))
    assert np.array_equal(outs[0], buf)
    if strategy == "ring":
        assert ledger.records() == []
    else:
        assert ledger.server.elements_received == 5
        assert ledger.workers[0].frames_sent == 1


def test_single_worker_ring_does_not_alias_input():
    buf = np.array([1.0, 2.0])
    outs, _ = allreduce_cluster([buf], ClusterConfig(1, "ring", "mean"))
    outs[0][0] = 99.0
    assert buf[0] == 1.0


@pytest.mark.parametrize("strategy", STRATEGIES)
@pytest.mark.parametrize("k", [1, 7, 64, 1000])
@pytest.mark.parametrize("n", [2, 3, 4, 8])
def test_oracle_equivalence_grid(strategy, k, n):
    rng = np.random.default_rng(k * 100 + n)
    bufs = [rng.standard_normal(k) for _ in range(n)]
    outs, _ = allreduce_cluster(bufs, ClusterConfig(n, strategy))
    want = direct_sum(bufs)
    for out in outs:
        assert rel_err(out, want) <= 1e-12
        assert np.array_equal(out, outs[0])


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_mean_is_sum_over_n(strategy, rng):
    bufs = [rng.standard_normal(11) for _ in range(3)]
    total, _ = allreduce_cluster(bufs, ClusterConfig(3, strategy, "sum"))
    mean, _ = allreduce_cluster(bufs, ClusterConfig(3, strategy, "mean"))
    for out in mean:
        assert np.array_equal(out, total[0] / 3)


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_mismatched_lengths_raise_protocol_error(strategy):
    bufs = [np.ones(8), np.ones(8), np.ones(9)]
    with pytest.raises(ProtocolError):
        allreduce_cluster(bufs, ClusterConfig(3, strategy), timeout=10)


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_non_finite_input_rejected(strategy):
    with pytest.raises(ValueError):
        allreduce_cluster([np.ones(4), np.array([1.0, np.nan, 0, 0])], ClusterConfig(2, strategy), timeout=10)


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_tcp_matches_inproc_bitwise(strategy, rng):
    bufs = [rng.standard_normal(37) for _ in range(4)]
    a, _ = allreduce_cluster(bufs, ClusterConfig(4, strategy), transport="inproc")
    b, _ = allreduce_cluster(bufs, ClusterConfig(4, strategy), transport="tcp")
    for x, y in zip(a, b):
        assert x.tobytes() == y.tobytes()


def test_empty_blocks_when_k_below_n(rng):
    bufs = [rng.standard_normal(2) for _ in range(4)]
    outs, ledger = allreduce_cluster(bufs, ClusterConfig(4))
    assert all(rel_err(o, direct_sum(bufs)) <= 1e-12 for o in outs)
    assert all(rec.frames_sent == 6 for rec in ledger.records())


def test_sequential_calls_on_same_cluster(rng):
    from ringsync.collectives import open_cluster, ring_allreduce, run_threads

    config = ClusterConfig(3)
    _, eps = open_cluster(config)
    for _ in range(3):
        bufs = [rng.standard_normal(10) for _ in range(3)]
        outs = run_threads([lambda r=r: ring_allreduce(bufs[r], r, config, eps[r]) for r in range(3)])
        assert rel_err(outs[0], direct_sum(bufs)) <= 1e-12
    assert all(ep.record.frames_sent == 3 * 4 for ep in eps)
    for ep in eps:
        ep.close()


def test_comm_volume_ring_examples():
    assert comm_volume_ring(1000, 4) == 1500
    assert comm_volume_ring(1000, 1) == 0
    # frozen from walked_ring_traffic on sizes [3, 3, 2, 2]
    assert [comm_volume_ring(10, 4, r) for r in range(4)] == [15, 16, 15, 14]
    assert walked_ring_traffic(10, 4) == [15, 16, 15, 14]


def test_comm_volume_ring_matches_walk_and_closed_form():
    for k in range(0, 40):
        for n in range(2, 10):
            sizes = partition(k, n).sizes
            walked = walked_ring_traffic(k, n)
            for r in range(n):
                assert comm_volume_ring(k, n, r) == walked[r]
                assert walked[r] == 2 * k - sizes[(r + 1) % n] - sizes[(r + 2) % n]
            if k % n == 0:
                assert all(v == 2 * k * (n - 1) // n for v in walked)


def test_comm_volume_ps_examples():
    assert comm_volume_ps(1000, 4)[0] == 4000
    assert comm_volume_ps(0, 8) == (0, 0)
    _, ledger = allreduce_cluster([np.ones(7)] * 3, ClusterConfig(3, "ps"))
    assert comm_volume_ps(7, 3) == (ledger.server.elements_received, ledger.server.elements_sent) == (21, 21)


@pytest.mark.parametrize("k, n", [(1000, 4), (10, 4), (7, 3), (64, 8), (1, 2)])
def test_ledger_matches_formulas(k, n, rng):
    bufs = [rng.standard_normal(k) for _ in range(n)]
    _, ring = allreduce_cluster(bufs, ClusterConfig(n, "ring"))
    for r, rec in ring.workers.items():
        assert rec.elements_sent == comm_volume_ring(k, n, r)
        assert rec.frames_sent == 2 * (n - 1)
        assert rec.bytes_sent == 8 * rec.elements_sent
    _, ps = allreduce_cluster(bufs, ClusterConfig(n, "ps"))
    assert (ps.server.elements_received, ps.server.elements_sent) == comm_volume_ps(k, n)
    for ledger in (ring, ps):
        assert ledger.total("elements_sent") == ledger.total("elements_received")
        assert ledger.total("bytes_sent") == ledger.total("bytes_received")


def test_volume_advantage():
    for k in (1, 7, 64, 1000):
        for n in (2, 3, 4, 8, 16, 64):
            assert all(comm_volume_ring(k, n, r) <= 2 * k for r in range(n))
            assert comm_volume_ps(k, n)[0] == n * k
