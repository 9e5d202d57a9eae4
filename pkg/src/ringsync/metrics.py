"""Training-time cost models for PS and ring synchronization.

Both models predict total time for ``n >= 2`` workers as
``T/n + C*g(n) + P``, where ``g(n) = n`` for the parameter server and
``g(n) = n/(n-1)`` for the ring. They are linear in (T, C, P), so fitting
is an ordinary least-squares solve.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class Architecture(str, enum.Enum):
    PS = "ps"
    RING = "ring"


class FitError(ValueError):
    pass


@dataclass(frozen=True)
class CostModel:
    architecture: Architecture
    T: float
    C: float
    P: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "architecture", Architecture(self.architecture))

    @property
    def valid(self) -> bool:
        return self.T > 0 and self.C >= 0 and self.P >= 0


@dataclass(frozen=True)
class TimingSample:
    n: int
    t: float

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError(f"worker count must be >= 1, got {self.n}")
        if not self.t > 0:
            raise ValueError(f"time must be positive, got {self.t}")


@dataclass(frozen=True)
class FitReport:
    model: CostModel
    residual_rms: float
    valid: bool
    residuals: tuple[float, ...]

    def negative_parameters(self) -> list[str]:
        return [name for name in ("T", "C", "P") if getattr(self.model, name) < 0]

    def to_dict(self) -> dict:
        m = self.model
        return {
            "architecture": m.architecture.value,
            "T": m.T,
            "C": m.C,
            "P": m.P,
            "residual_rms": self.residual_rms,
            "valid": self.valid,
        }


def comm_basis(architecture: Architecture, n) -> np.ndarray:
    """The communication term's shape ``g(n)``, in ``n``'s float precision."""
    n = np.asarray(n)
    if n.dtype.kind != "f":
        n = n.astype(np.float64)
    if Architecture(architecture) is Architecture.PS:
        return n
    return n / (n - 1)


def predict_time(model: CostModel, n: int) -> float:
    if n < 1:
        raise ValueError(f"worker count must be >= 1, got {n}")
    if model.architecture is Architecture.RING and n == 1:
        raise ValueError("ring model is undefined at n=1 (n/(n-1) is singular)")
    return model.T / n + model.C * float(comm_basis(model.architecture, n)) + model.P


def fit_cost_model(samples: Sequence[TimingSample], architecture) -> FitReport:
    """Least-squares fit of (T, C, P) on the basis {1/n, g(n), 1}.

    Samples with ``n == 1`` are rejected; they belong to :func:`speed_ratio`
    as the single-worker baseline, not to the fit.
    """
    architecture = Architecture(architecture)
    if any(s.n < 2 for s in samples):
        raise FitError("fit samples must have n >= 2; use n=1 timings only as t0")
    if len({s.n for s in samples}) < 3:
        raise FitError("need at least 3 distinct worker counts to fit three parameters")
    n = np.array([s.n for s in samples], dtype=np.float64)
    t = np.array([s.t for s in samples], dtype=np.float64)
    design = np.column_stack([1.0 / n, comm_basis(architecture, n), np.ones_like(n)])

    # Column scaling keeps the QR well conditioned when g(n) and 1/n differ in magnitude.
    scale = np.linalg.norm(design, axis=0)
    q, r = np.linalg.qr(design / scale)
    if np.linalg.matrix_rank(r) < 3:
        raise FitError("design matrix is rank deficient")
    coef = np.linalg.solve(r, q.T @ t) / scale

    # g(n) is nearly collinear with the constant column on tight n-grids; a
    # couple of refinement steps with an extended-precision residual recover
    # the digits the first solve loses.
    wide = np.array([s.n for s in samples], dtype=np.longdouble)
    design_wide = np.column_stack([1 / wide, comm_basis(architecture, wide), np.ones_like(wide)])
    t_wide = t.astype(np.longdouble)
    for _ in range(2):
        res = (t_wide - design_wide @ coef.astype(np.longdouble)).astype(np.float64)
        coef = coef + np.linalg.solve(r, q.T @ res) / scale

    residuals = t - design @ coef
    model = CostModel(architecture, *(float(c) for c in coef))
    return FitReport(
        model=model,
        residual_rms=float(np.sqrt(np.mean(residuals**2))),
        valid=model.valid,
        residuals=tuple(float(x) for x in residuals),
    )


def speed_ratio(t0: float, t: float) -> float:
    if not (t0 > 0 and t > 0):
        raise ValueError(f"speed ratio needs positive times, got t0={t0}, t={t}")
    return t0 / t


def crossover(ps: CostModel, ring: CostModel, n_max: int) -> int | None:
    """Smallest n in [2, n_max] where the ring model is no slower than PS."""
    if n_max < 2:
        raise ValueError(f"n_max must be >= 2, got {n_max}")
    for n in range(2, n_max + 1):
        if predict_time(ring, n) <= predict_time(ps, n):
            return n
    return None


def synthesize(model: CostModel, ns: Iterable[int]) -> list[TimingSample]:
    """Noiseless samples generated from ``model``."""
    return [TimingSample(n, predict_time(model, n)) for n in ns]


# --- file formats -----------------------------------------------------------

CSV_TIME_COLUMN = "t_seconds"


def read_samples(path) -> list[TimingSample]:
    """Read ``n,t_seconds[,...]`` rows; extra columns are ignored."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"n", CSV_TIME_COLUMN} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing column(s) {', '.join(sorted(missing))}")
        samples = []
        for row in reader:
            line = reader.line_num
            try:
                n = int(row["n"])
            except (TypeError, ValueError):
                raise ValueError(f"{path}:{line}: bad value for field 'n': {row['n']!r}") from None
            try:
                t = float(row[CSV_TIME_COLUMN])
            except (TypeError, ValueError):
                raise ValueError(
                    f"{path}:{line}: bad value for field '{CSV_TIME_COLUMN}': {row[CSV_TIME_COLUMN]!r}"
                ) from None
            try:
                samples.append(TimingSample(n, t))
            except ValueError as exc:
                raise ValueError(f"{path}:{line}: {exc}") from None
    return samples


def write_samples(path, samples: Iterable[TimingSample]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n", CSV_TIME_COLUMN])
        for s in samples:
            writer.writerow([s.n, repr(s.t)])


def write_report(path, report: FitReport) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")


def read_model(path) -> CostModel:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a JSON object")
    for key in ("architecture", "T", "C", "P"):
        if key not in data:
            raise ValueError(f"{path}: missing field '{key}'")
    try:
        arch = Architecture(data["architecture"])
    except ValueError:
        raise ValueError(f"{path}: bad value for field 'architecture': {data['architecture']!r}") from None
    params = []
    for key in ("T", "C", "P"):
        value = data[key]
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ValueError(f"{path}: bad value for field '{key}': {value!r}")
        params.append(float(value))
    return CostModel(arch, *params)
