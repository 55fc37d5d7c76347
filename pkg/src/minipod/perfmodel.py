"""Analytic step-time model: per-core compute plus ring all-reduce.

Compute is charged for the padded per-core batch (batch dims pad to a
multiple of eight). Communication follows the standard two-phase ring
all-reduce cost 2(N-1)/N * bytes/bandwidth + 2(N-1) * hop latency, fully
serialized with compute. Calibration recovers the model constants from
published (cores, batch, throughput, all-reduce%) rows by closed-form
weighted least squares, so fits are deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .collectives import padded_batch_utilization

DEFAULT_PARAM_BYTES = 4 * 9_110_000  # fp32 gradient bytes of a ~9.1M-param model


@dataclass(frozen=True)
class CostModelParams:
    per_image_compute_ms: float
    param_bytes: int
    link_bandwidth_bytes_per_ms: float
    per_hop_latency_ms: float

    def __post_init__(self):
        if self.per_image_compute_ms <= 0:
            raise ValueError("per_image_compute_ms must be > 0")
        if self.param_bytes <= 0:
            raise ValueError("param_bytes must be > 0")
        if self.link_bandwidth_bytes_per_ms <= 0:
            raise ValueError("link bandwidth must be > 0")
        if self.per_hop_latency_ms < 0:
            raise ValueError("per-hop latency must be >= 0")


# Loosely tuned to the published b2 throughput rows; bench recalibrates.
DEFAULT_COST_PARAMS = CostModelParams(
    per_image_compute_ms=2.19,
    param_bytes=DEFAULT_PARAM_BYTES,
    link_bandwidth_bytes_per_ms=4.2e7,
    per_hop_latency_ms=3e-4,
)


def allreduce_time(param_bytes: int, num_replicas: int, p: CostModelParams) -> float:
    """Milliseconds for one ring all-reduce of param_bytes across N replicas."""
    if num_replicas < 1:
        raise ValueError(f"num_replicas must be >= 1, got {num_replicas}")
    if num_replicas == 1:
        return 0.0
    n = num_replicas
    bw_term = 2.0 * (n - 1) / n * param_bytes / p.link_bandwidth_bytes_per_ms
    lat_term = 2.0 * (n - 1) * p.per_hop_latency_ms
    return bw_term + lat_term


def step_time(b_per_core: int, num_replicas: int, p: CostModelParams) -> float:
    """Modeled milliseconds per synchronous training step."""
    padded, _ = padded_batch_utilization(b_per_core)
    return padded * p.per_image_compute_ms + allreduce_time(
        p.param_bytes, num_replicas, p
    )


def throughput(global_batch: int, step_ms: float) -> float:
    """Images per millisecond at the given step time."""
    if global_batch < 1 or step_ms <= 0:
        raise ValueError("global_batch and step_ms must be positive")
    return global_batch / step_ms


def allreduce_fraction(b_per_core: int, num_replicas: int, p: CostModelParams) -> float:
    """Percent of the modeled step spent in the all-reduce."""
    return allreduce_time(p.param_bytes, num_replicas, p) / step_time(
        b_per_core, num_replicas, p
    ) * 100.0


def predict(p: CostModelParams, num_replicas: int, global_batch: int):
    """(throughput images/ms, all-reduce percent) for one configuration."""
    if global_batch % num_replicas != 0:
        raise ValueError(
            f"global batch {global_batch} not divisible by {num_replicas} replicas"
        )
    b = global_batch // num_replicas
    ms = step_time(b, num_replicas, p)
    return throughput(global_batch, ms), allreduce_fraction(b, num_replicas, p)


def calibrate(
    rows: list[tuple[int, int, float, float]],
    param_bytes: int = DEFAULT_PARAM_BYTES,
) -> CostModelParams:
    """Fit (compute, bandwidth, latency) to (N, B, throughput, allreduce%) rows.

    Each row decomposes into a compute time and an all-reduce time; relative
    least squares then recovers per-image compute from the former and the
    ring bandwidth/latency terms from the latter. param_bytes is taken as
    given (only the bytes/bandwidth ratio is identifiable from timings).
    """
    if len(rows) < 2:
        raise ValueError("calibration needs at least 2 rows")
    if len({n for n, _, _, _ in rows}) < 2:
        raise ValueError("calibration rows must span at least two replica counts")

    comp_a, comp_y = [], []  # padded batch -> compute ms
    ar_x, ar_y = [], []  # (bw coef, lat coef) -> all-reduce ms
    for n, batch, thr, frac in rows:
        n, batch, thr, frac = int(n), int(batch), float(thr), float(frac)
        if batch % n != 0:
            raise ValueError(f"row batch {batch} not divisible by {n} cores")
        if thr <= 0 or not 0 <= frac < 100:
            raise ValueError(f"bad throughput/fraction row ({thr}, {frac})")
        step = batch / thr
        ar = step * frac / 100.0
        comp = step - ar
        padded, _ = padded_batch_utilization(batch // n)
        comp_a.append(padded)
        comp_y.append(comp)
        if n > 1:
            ar_x.append((2.0 * (n - 1) / n, 2.0 * (n - 1)))
            ar_y.append(ar)

    comp_a = np.asarray(comp_a, dtype=np.float64)
    comp_y = np.asarray(comp_y, dtype=np.float64)
    # One-parameter relative least squares: rows weighted by 1/target.
    c = float((comp_a / comp_y).sum() / (comp_a**2 / comp_y**2).sum())

    if not ar_y or all(y <= 0 for y in ar_y):
        bw, lat = math.inf, 0.0
    else:
        x = np.asarray(ar_x, dtype=np.float64)
        y = np.asarray(ar_y, dtype=np.float64)
        w = 1.0 / np.where(y > 0, y, 1.0)
        bw_time, lat_unit = _nonneg_lstsq(x * w[:, None], y * w)
        bw = param_bytes / bw_time if bw_time > 0 else math.inf
        lat = lat_unit

    return CostModelParams(
        per_image_compute_ms=c,
        param_bytes=param_bytes,
        link_bandwidth_bytes_per_ms=bw,
        per_hop_latency_ms=lat,
    )


def _nonneg_lstsq(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Two-column least squares with nonnegative coefficients.

    A negative coefficient is clamped to zero and the other refit; closed
    form throughout, so the result is exactly reproducible.
    """
    sol, *_ = np.linalg.lstsq(x, y, rcond=None)
    a, b = float(sol[0]), float(sol[1])
    if a < 0:
        a = 0.0
        b = float((x[:, 1] @ y) / (x[:, 1] @ x[:, 1]))
        b = max(b, 0.0)
    elif b < 0:
        b = 0.0
        a = float((x[:, 0] @ y) / (x[:, 0] @ x[:, 0]))
        a = max(a, 0.0)
    return a, b
