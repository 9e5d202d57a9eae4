"""Ring all-reduce and parameter-server gradient synchronization."""

from .collectives import (
    allreduce_cluster,
    comm_volume_ps,
    comm_volume_ring,
    ps_allreduce,
    ps_serve,
    ring_allreduce,
)
from .core import (
    BlockPartition,
    ClusterConfig,
    ReduceOp,
    Strategy,
    gather_schedule,
    partition,
    scatter_schedule,
)
from .metrics import (
    Architecture,
    CostModel,
    FitReport,
    TimingSample,
    crossover,
    fit_cost_model,
    predict_time,
    speed_ratio,
)
from .transport import CommLedger, Frame, LinkProfile, connect_ring, connect_star

__version__ = "0.1.0"
