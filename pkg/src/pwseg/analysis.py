"""Attention-locality analysis, Dice metric, and the throughput benchmark.

Mean attention distance (MAD) measures how far an attention head looks: the
attention-weighted average physical distance between query voxels and the
voxels they attend to, averaged over queries.  The benchmark harness times
whole-network forwards and reports patches per second plus the cost-model
breakdown for the measured configuration.
"""

from __future__ import annotations

import hashlib
import json
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ShapeError


def index_to_coords(i: int, grid) -> tuple[int, int, int]:
    """Map a flattened voxel index to (x, y, z) with x (width) fastest.

    ``grid`` is (D, H, W); z = i // (H*W), y = (i % (H*W)) // W, x = i % W.
    """
    d, h, w = (int(g) for g in grid)
    l = d * h * w
    if not 0 <= i < l:
        raise IndexError(f"index {i} out of range for grid {tuple(grid)} with {l} voxels")
    z = i // (h * w)
    y = (i % (h * w)) // w
    x = i % w
    return (x, y, z)


@dataclass(frozen=True)
class MadInput:
    """A row-stochastic attention matrix over a voxel grid with physical spacing."""

    weights: np.ndarray
    grid: tuple[int, int, int]
    spacing: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=np.float64))
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        l = self.grid[0] * self.grid[1] * self.grid[2]
        if self.weights.shape != (l, l):
            raise ShapeError(f"weights shape {self.weights.shape} != ({l}, {l}) for grid {self.grid}")
        if self.spacing <= 0:
            raise DomainError(f"voxel spacing must be positive, got {self.spacing}")


def mad(inp: MadInput) -> float:
    """Mean attention distance: (1/L) sum_ij W_ij * distance(i, j).

    Row sums must be 1 within 1e-3 and entries non-negative (beyond a small
    numerical slack); distances are voxel-center Euclidean distances scaled
    by the physical spacing.
    """
    w = inp.weights
    l = w.shape[0]
    row_sums = w.sum(axis=1)
    if np.max(np.abs(row_sums - 1.0)) > 1e-3:
        worst = int(np.argmax(np.abs(row_sums - 1.0)))
        raise ValueError(f"attention row {worst} sums to {row_sums[worst]:.6f}, not 1")
    if w.min() < -1e-9:
        raise ValueError(f"attention weights must be non-negative, min is {w.min():.3e}")
    d, h, ww = inp.grid
    idx = np.arange(l)
    z = idx // (h * ww)
    y = (idx % (h * ww)) // ww
    x = idx % ww
    coords = np.stack([x, y, z], axis=1).astype(np.float64)
    deltas = coords[:, None, :] - coords[None, :, :]
    dist = inp.spacing * np.sqrt((deltas * deltas).sum(axis=2))
    return float((w * dist).sum() / l)


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """Dice overlap 2|P & G| / (|P| + |G|); defined as 1 when both are empty."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
    p = pred.astype(bool)
    g = gt.astype(bool)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


@dataclass
class BenchReport:
    """Result of one throughput measurement."""

    config_digest: str
    extent: tuple[int, int, int]
    threads: int
    warmup_iters: int
    measure_iters: int
    patches_per_second: float
    median_iteration_seconds: float
    total_seconds: float
    flops_per_patch: int
    stage_flop_shares: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = dict(self.__dict__)
        payload["extent"] = list(self.extent)
        return json.dumps(payload, indent=2, sort_keys=True)


def config_digest(cfg) -> str:
    """Stable digest of a network configuration for report provenance."""
    from dataclasses import asdict

    return hashlib.sha256(json.dumps(asdict(cfg), sort_keys=True, default=list).encode()).hexdigest()[:16]


def bench(cfg, extent=None, threads: int = 1, iters: int = 10, warmup: int = 1, seed: int = 0) -> BenchReport:
    """Measure forward throughput of the network built from ``cfg``.

    Runs ``warmup`` discarded forwards, then ``iters`` measured ones on
    ``threads`` worker threads (each iteration is one full patch forward on
    its own input copy).  Wall time uses the monotonic performance counter.
    """
    from .network import build, flop_breakdown, forward, total_flops

    if iters < 1 or warmup < 1:
        raise DomainError("need at least one warmup and one measured iteration")
    if extent is not None and tuple(extent) != tuple(cfg.input_extent):
        from dataclasses import replace

        cfg = replace(cfg, input_extent=tuple(int(e) for e in extent))
    net = build(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    d, h, w = cfg.input_extent
    volumes = [rng.standard_normal((1, d, h, w), dtype=np.float32) for _ in range(cfg.modalities)]

    for _ in range(warmup):
        forward(net, volumes)

    times: list[float] = []

    def one_iteration(_):
        t0 = time.perf_counter()
        forward(net, volumes)
        return time.perf_counter() - t0

    start = time.perf_counter()
    if threads <= 1:
        for i in range(iters):
            times.append(one_iteration(i))
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            times = list(pool.map(one_iteration, range(iters)))
    total = time.perf_counter() - start

    breakdown = flop_breakdown(net, cfg.input_extent)
    total_cost = sum(breakdown.values())
    shares = {k: v / total_cost for k, v in breakdown.items()}
    return BenchReport(
        config_digest=config_digest(cfg),
        extent=tuple(cfg.input_extent),
        threads=threads,
        warmup_iters=warmup,
        measure_iters=iters,
        patches_per_second=iters / total,
        median_iteration_seconds=statistics.median(times),
        total_seconds=total,
        flops_per_patch=total_flops(net, cfg.input_extent),
        stage_flop_shares=shares,
    )
