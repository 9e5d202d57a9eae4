"""Synchronous data-parallel SGD on a least-squares task.

The loss is ``0.5 * ||Xw - y||^2``. Its gradient splits exactly across
sample shards, so summing shard gradients with either collective must
reproduce single-process full-batch descent.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .collectives import open_cluster, ps_allreduce, ps_serve, ring_allreduce, run_threads
from .core import ClusterConfig, Strategy, partition
from .transport import NO_DELAY, CommLedger, LinkProfile


class TrainingError(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class LeastSquaresTask:
    features: np.ndarray
    targets: np.ndarray
    shards: tuple[range, ...]
    seed: int

    @property
    def samples(self) -> int:
        return self.features.shape[0]

    @property
    def dims(self) -> int:
        return self.features.shape[1]

    def reshard(self, workers: int) -> LeastSquaresTask:
        return replace(self, shards=shard_ranges(self.samples, workers))

    def optimum(self) -> np.ndarray:
        return np.linalg.lstsq(self.features, self.targets, rcond=None)[0]


def shard_ranges(samples: int, workers: int) -> tuple[range, ...]:
    part = partition(samples, workers)
    return tuple(range(*part.bounds(b)) for b in range(workers))


def make_task(
    seed: int = 0, samples: int = 256, dims: int = 16, noise: float = 0.1, workers: int = 1
) -> LeastSquaresTask:
    """Random linear-regression task, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((samples, dims))
    w_true = rng.standard_normal(dims)
    y = x @ w_true + noise * rng.standard_normal(samples)
    return LeastSquaresTask(x, y, shard_ranges(samples, workers), seed)


def local_gradient(params: np.ndarray, task: LeastSquaresTask, shard: range) -> np.ndarray:
    w = np.asarray(params, dtype=np.float64)
    if w.shape != (task.dims,):
        raise ValueError(f"params have shape {w.shape}, task has {task.dims} dims")
    if len(shard) == 0:
        return np.zeros(task.dims)
    x = task.features[shard.start : shard.stop]
    y = task.targets[shard.start : shard.stop]
    return x.T @ (x @ w - y)


@dataclass(frozen=True)
class TimingBreakdown:
    t1_compute: float
    t2_communication: float
    t3_overhead: float
    t_total: float


@dataclass
class TrainResult:
    params: np.ndarray
    timings: list[TimingBreakdown]
    ledger: CommLedger
    setup_seconds: float = 0.0
    wall_seconds: float = 0.0
    history: list[np.ndarray] = field(default_factory=list)

    def __iter__(self):
        # allows ``params, timings, ledger = train(...)``
        return iter((self.params, self.timings, self.ledger))


def full_batch_descent(task: LeastSquaresTask, steps: int, lr: float, init=None) -> list[np.ndarray]:
    """Single-process reference trajectory; element ``k`` is w after k steps."""
    w = np.zeros(task.dims) if init is None else np.array(init, dtype=np.float64)
    traj = [w.copy()]
    everything = range(task.samples)
    for _ in range(steps):
        w = w - lr * local_gradient(w, task, everything)
        traj.append(w.copy())
    return traj


def _merge(per_worker: list[list[tuple[float, float, float, float]]]) -> list[TimingBreakdown]:
    # The slowest worker sets each step's pace.
    out = []
    for rows in zip(*per_worker):
        t1, t2, t3, tt = (max(col) for col in zip(*rows))
        out.append(TimingBreakdown(t1, t2, t3, tt))
    return out


def train(
    task: LeastSquaresTask,
    config: ClusterConfig,
    steps: int,
    lr: float,
    *,
    transport: str = "inproc",
    profile: LinkProfile = NO_DELAY,
    compute_delay: float = 0.0,
    init=None,
    keep_history: bool = False,
) -> TrainResult:
    """Run ``steps`` of synchronous SGD across ``config.worker_count`` threads.

    ``compute_delay`` is the artificial single-worker compute time per step;
    each worker sleeps ``compute_delay / N`` after computing its gradient.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if lr < 0:
        raise ValueError(f"lr must be >= 0, got {lr}")
    n = config.worker_count
    if len(task.shards) != n:
        task = task.reshard(n)
    w0 = np.zeros(task.dims) if init is None else np.array(init, dtype=np.float64)

    wall_start = time.perf_counter()
    server, workers = open_cluster(config, profile, transport=transport, timeout=120.0)
    setup = time.perf_counter() - wall_start
    endpoints = [ep for ep in [*workers, server] if ep is not None]
    reduce = ring_allreduce if config.strategy is Strategy.RING else ps_allreduce

    def worker(rank: int):
        w = w0.copy()
        rows = []
        history = [w.copy()] if keep_history else []
        for step in range(1, steps + 1):
            start = time.perf_counter()
            with np.errstate(over="ignore", invalid="ignore"):
                grad = local_gradient(w, task, task.shards[rank])
            if not np.all(np.isfinite(grad)):
                raise TrainingError(step, f"rank {rank} gradient became non-finite")
            if compute_delay > 0:
                time.sleep(compute_delay / n)
            computed = time.perf_counter()
            reduced = reduce(grad, rank, config, workers[rank])
            communicated = time.perf_counter()
            with np.errstate(over="ignore", invalid="ignore"):
                w = w - lr * reduced
            if not np.all(np.isfinite(w)):
                raise TrainingError(step, f"rank {rank} parameters became non-finite")
            if keep_history:
                history.append(w.copy())
            done = time.perf_counter()
            rows.append((computed - start, communicated - computed, done - communicated, done - start))
        return w, rows, history

    def guarded(rank: int):
        try:
            return worker(rank)
        except BaseException:
            if workers[rank] is not None:
                workers[rank].close()
            raise

    def serve():
        for _ in range(steps):
            ps_serve(server, config)

    targets = [(lambda r=r: guarded(r)) for r in range(n)]
    if server is not None:
        targets.append(serve)
    try:
        results = run_threads(targets)[:n]
    finally:
        teardown = time.perf_counter()
        for ep in endpoints:
            ep.close()
        setup += time.perf_counter() - teardown
    wall = time.perf_counter() - wall_start

    final = results[0][0]
    for rank, (w, _, _) in enumerate(results[1:], start=1):
        if not np.array_equal(w, final):
            raise TrainingError(steps, f"rank {rank} diverged from rank 0")
    return TrainResult(
        params=final,
        timings=_merge([rows for _, rows, _ in results]),
        ledger=CommLedger.from_endpoints(endpoints),
        setup_seconds=setup,
        wall_seconds=wall,
        history=results[0][2],
    )
