"""Ring all-reduce, parameter-server aggregation, and their traffic formulas."""

from __future__ import annotations

import threading

import numpy as np

from .core import (
    ClusterConfig,
    ReduceOp,
    Strategy,
    as_gradient,
    gather_schedule,
    partition,
    scatter_schedule,
)
from .transport import (
    NO_DELAY,
    SERVER,
    CommLedger,
    Endpoint,
    Frame,
    LinkClosedError,
    LinkProfile,
    MsgType,
    ProtocolError,
    connect_ring,
    connect_star,
)


def _finish(buf: np.ndarray, config: ClusterConfig) -> np.ndarray:
    if config.reduce_op is ReduceOp.MEAN:
        buf /= config.worker_count
    return buf


def _expect_block(frame: Frame, round_: int, block: int, size: int, rank: int) -> np.ndarray:
    if frame.msg_type != MsgType.GRAD_BLOCK:
        raise ProtocolError(f"rank {rank}: expected GradBlock, got {frame.msg_type.name}")
    if frame.round != round_ or frame.block_index != block:
        raise ProtocolError(
            f"rank {rank}: expected round {round_} block {block}, "
            f"got round {frame.round} block {frame.block_index}"
        )
    if frame.element_count != size:
        raise ProtocolError(
            f"rank {rank}: block {block} has {frame.element_count} elements, expected {size} "
            "(gradient sizes differ across workers?)"
        )
    return frame.values()


def ring_allreduce(local, rank: int, config: ClusterConfig, endpoint: Endpoint | None) -> np.ndarray:
    """All-reduce ``local`` around the ring; every rank gets the same result.

    Scatter-reduce runs N-1 rounds that add the incoming block into the
    local copy; all-gather runs N-1 more that overwrite it. Frames carry the
    global round number (scatter 0..N-2, gather N-1..2N-3).
    """
    n = config.worker_count
    if n == 1:
        return _finish(as_gradient(local), config)
    try:
        buf = as_gradient(local)
        part = partition(buf.size, n)
        for i in range(n - 1):
            send, recv = scatter_schedule(rank, n, i)
            endpoint.send_right(Frame.grad_block(i, send, buf[part.slice(send)]))
            incoming = _expect_block(endpoint.recv_left(), i, recv, part.size(recv), rank)
            buf[part.slice(recv)] += incoming
        for i in range(n - 1):
            send, recv = gather_schedule(rank, n, i)
            round_ = n - 1 + i
            endpoint.send_right(Frame.grad_block(round_, send, buf[part.slice(send)]))
            buf[part.slice(recv)] = _expect_block(endpoint.recv_left(), round_, recv, part.size(recv), rank)
    except BaseException:
        endpoint.close()
        raise
    return _finish(buf, config)


def ps_allreduce(local, rank: int, config: ClusterConfig, endpoint: Endpoint) -> np.ndarray:
    """Worker side of the parameter server: push ``local``, pull the reduction."""
    try:
        buf = as_gradient(local)
        endpoint.send_frame(SERVER, Frame.grad_block(0, rank, buf))
        reply = endpoint.recv_frame(SERVER)
        return _expect_block(reply, 1, rank, buf.size, rank)
    except BaseException:
        endpoint.close()
        raise


def ps_serve(server: Endpoint, config: ClusterConfig) -> np.ndarray:
    """Server side of one PS round.

    Buffers are accumulated strictly in ascending rank order so the result
    does not depend on arrival timing; the single result buffer is then sent
    back to every worker.
    """
    n = config.worker_count
    acc = None
    try:
        for r in range(n):
            frame = server.recv_frame(r)
            if frame.msg_type != MsgType.GRAD_BLOCK or frame.round != 0 or frame.block_index != r:
                raise ProtocolError(f"server: unexpected frame from worker {r}: {frame.msg_type.name}")
            values = frame.values()
            if acc is None:
                acc = values.copy()
            elif values.size != acc.size:
                raise ProtocolError(
                    f"server: worker {r} sent {values.size} elements, worker 0 sent {acc.size}"
                )
            else:
                acc += values
        acc = _finish(acc, config)
        for r in range(n):
            server.send_frame(r, Frame.grad_block(1, r, acc))
    except BaseException:
        server.close()
        raise
    return acc


def comm_volume_ring(total_len: int, n: int, rank: int = 0) -> int:
    """Elements ``rank`` sends during one ring all-reduce.

    Scatter-reduce sends every block except the one this rank completes;
    all-gather sends every block except the one it receives last. With
    uneven blocks the total therefore depends on the rank; it equals
    ``2K(N-1)/N`` for every rank when N divides K.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if n == 1:
        return 0
    part = partition(total_len, n)
    sent = 0
    for i in range(n - 1):
        sent += part.size(scatter_schedule(rank, n, i)[0])
        sent += part.size(gather_schedule(rank, n, i)[0])
    return sent


def comm_volume_ps(total_len: int, n: int) -> tuple[int, int]:
    """(uplink, downlink) elements at the server for one PS round."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return n * total_len, n * total_len


def _root_cause(errors: list[BaseException]) -> BaseException:
    # Peers of a failing rank see LinkClosedError; report the original fault.
    for exc in errors:
        if not isinstance(exc, LinkClosedError):
            return exc
    return errors[0]


def run_threads(targets) -> list:
    """Run callables concurrently, returning results or raising the root-cause error."""
    results: list = [None] * len(targets)
    errors: list[BaseException] = []
    lock = threading.Lock()

    def call(i, fn):
        try:
            results[i] = fn()
        except BaseException as exc:
            with lock:
                errors.append(exc)

    threads = [threading.Thread(target=call, args=(i, fn), daemon=True) for i, fn in enumerate(targets)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise _root_cause(errors)
    return results


def open_cluster(
    config: ClusterConfig,
    profile: LinkProfile = NO_DELAY,
    *,
    transport: str = "inproc",
    addresses: list[tuple[str, int]] | None = None,
    timeout: float | None = None,
) -> tuple[Endpoint | None, list[Endpoint | None]]:
    """Build the topology ``config.strategy`` needs.

    Returns ``(server, workers)``; ``server`` is None for the ring, and a
    single-worker ring has no endpoints at all. For TCP, ``addresses`` lists
    one ``(host, port)`` per ring rank; a star uses only the first entry,
    for the server.
    """
    if config.strategy is Strategy.RING:
        if config.worker_count == 1:
            return None, [None]
        return None, connect_ring(
            config, profile, transport=transport, addresses=addresses, timeout=timeout
        )
    address = addresses[0] if addresses else None
    return connect_star(config, profile, transport=transport, address=address, timeout=timeout)


def allreduce_cluster(
    buffers,
    config: ClusterConfig,
    *,
    transport: str = "inproc",
    profile: LinkProfile = NO_DELAY,
    addresses: list[tuple[str, int]] | None = None,
    timeout: float | None = 60.0,
) -> tuple[list[np.ndarray], CommLedger]:
    """Run one all-reduce over ``len(buffers)`` worker threads.

    Convenience harness for tests and the CLI: builds the topology, runs each
    rank (and the server for PS) in its own thread, and tears it down.
    """
    if len(buffers) != config.worker_count:
        raise ValueError(f"got {len(buffers)} buffers for {config.worker_count} workers")
    server, workers = open_cluster(
        config, profile, transport=transport, addresses=addresses, timeout=timeout
    )
    endpoints = [ep for ep in [*workers, server] if ep is not None]
    if config.strategy is Strategy.RING:
        targets = [
            (lambda r=r: ring_allreduce(buffers[r], r, config, workers[r]))
            for r in range(config.worker_count)
        ]
    else:
        targets = [
            (lambda r=r: ps_allreduce(buffers[r], r, config, workers[r]))
            for r in range(config.worker_count)
        ]
        targets.append(lambda: ps_serve(server, config))
    try:
        results = run_threads(targets)
    finally:
        for ep in endpoints:
            ep.close()
    return results[: config.worker_count], CommLedger.from_endpoints(endpoints)
