"""Gradient buffers, block partitioning and the ring round schedules.

Block indices are always taken as non-negative residues mod N, so a rank
"behind" block 0 wraps to N-1 rather than producing a negative index.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class Strategy(str, enum.Enum):
    RING = "ring"
    PARAMETER_SERVER = "ps"


class ReduceOp(str, enum.Enum):
    SUM = "sum"
    MEAN = "mean"


@dataclass(frozen=True)
class ClusterConfig:
    worker_count: int
    strategy: Strategy = Strategy.RING
    reduce_op: ReduceOp = ReduceOp.SUM

    def __post_init__(self) -> None:
        if self.worker_count < 1:
            raise ValueError(f"worker_count must be >= 1, got {self.worker_count}")
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        object.__setattr__(self, "reduce_op", ReduceOp(self.reduce_op))


def as_gradient(values, *, copy: bool = True) -> np.ndarray:
    """Coerce to a flat float64 buffer and reject non-finite entries."""
    buf = np.array(values, dtype=np.float64, copy=copy).reshape(-1)
    if not np.all(np.isfinite(buf)):
        raise ValueError("gradient buffer contains NaN or Inf")
    return buf


@dataclass(frozen=True)
class BlockPartition:
    total_len: int
    block_count: int
    offsets: tuple[int, ...]

    def bounds(self, block: int) -> tuple[int, int]:
        return self.offsets[block], self.offsets[block + 1]

    def slice(self, block: int) -> slice:
        lo, hi = self.bounds(block)
        return slice(lo, hi)

    def size(self, block: int) -> int:
        lo, hi = self.bounds(block)
        return hi - lo

    @property
    def sizes(self) -> list[int]:
        return [self.size(b) for b in range(self.block_count)]


def partition(total_len: int, block_count: int) -> BlockPartition:
    """Split ``[0, total_len)`` into ``block_count`` contiguous blocks.

    The first ``total_len % block_count`` blocks get one extra element, so
    sizes never differ by more than one. Blocks may be empty when
    ``total_len < block_count``.
    """
    if block_count < 1:
        raise ValueError(f"block_count must be >= 1, got {block_count}")
    if total_len < 0:
        raise ValueError(f"total_len must be >= 0, got {total_len}")
    base, extra = divmod(total_len, block_count)
    offsets = [0]
    for b in range(block_count):
        offsets.append(offsets[-1] + base + (1 if b < extra else 0))
    return BlockPartition(total_len, block_count, tuple(offsets))


def _check_round(rank: int, n: int, round_: int) -> None:
    if n < 2:
        raise ValueError(f"ring schedules need N >= 2, got {n}")
    if not 0 <= rank < n:
        raise ValueError(f"rank {rank} out of range for N={n}")
    if not 0 <= round_ <= n - 2:
        raise ValueError(f"round {round_} out of range [0, {n - 2}]")


def scatter_schedule(rank: int, n: int, round_: int) -> tuple[int, int]:
    """(send_block, recv_block) for one scatter-reduce round."""
    _check_round(rank, n, round_)
    return (rank - round_) % n, (rank - round_ - 1) % n


def gather_schedule(rank: int, n: int, round_: int) -> tuple[int, int]:
    """(send_block, recv_block) for one all-gather round.

    Round 0 forwards the block this rank finished reducing during scatter,
    ``(rank + 1) % n``; each later round forwards what arrived last round.
    """
    _check_round(rank, n, round_)
    return (rank + 1 - round_) % n, (rank - round_) % n


def reduced_block(rank: int, n: int) -> int:
    """Block a rank holds fully reduced once scatter-reduce finishes."""
    return (rank + 1) % n
