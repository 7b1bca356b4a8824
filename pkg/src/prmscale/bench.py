"""Cache-latency benchmark and direction-field probe."""
from __future__ import annotations

import os
import platform
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .env import Action, Observation
from .numeric.rng import RngStream
from .plots import quiver_svg

DEFAULT_COUNTS = (10, 100, 1000)
NO_CACHE_CHUNK = 1000


@dataclass(frozen=True)
class BenchRow:
    count: int
    t_nocache: float
    t_cache: float
    max_abs_diff: float = 0.0

    @property
    def speedup(self) -> float:
        return self.t_nocache / self.t_cache

    @property
    def per_action_ms(self) -> float:
        return 1e3 * self.t_cache / self.count


@dataclass
class BenchReport:
    rows: list
    hardware: str = ""
    protocol: str = ""

    def __post_init__(self):
        counts = [r.count for r in self.rows]
        if any(b <= a for a, b in zip(counts, counts[1:])):
            raise ValueError("counts must be strictly increasing")

    def row(self, count: int) -> BenchRow:
        return next(r for r in self.rows if r.count == count)

    COLUMNS = ("count", "latency_nocache_s", "latency_cache_s", "speedup", "per_action_ms", "max_abs_diff")

    def csv_rows(self) -> list[list]:
        return [[r.count, r.t_nocache, r.t_cache, r.speedup, r.per_action_ms, r.max_abs_diff]
                for r in self.rows]


def hardware_note() -> str:
    return (f"{platform.machine()} {platform.processor() or 'cpu'}; python {platform.python_version()}; "
            f"numpy {np.__version__}; cpus {os.cpu_count()}; single-threaded driver")


def _median_time(fn, reps: int, warmup: int) -> tuple[float, object]:
    out = None
    for _ in range(warmup):
        out = fn()
    times = []
    for _ in range(reps):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return statistics.median(times), out


def probe_actions(count: int, d_dir: int, seed: int = 0, scale: float = 0.1) -> np.ndarray:
    gen = RngStream(seed, "bench").generator
    poses = gen.uniform(-scale, scale, size=(count, d_dir))
    grip = np.where(gen.random(count) < 0.5, -1.0, 1.0)
    return np.concatenate([poses, grip[:, None]], axis=1)


def bench_cache(prm, obs: Observation, counts=DEFAULT_COUNTS, reps: int = 5, warmup: int = 2,
                seed: int = 0) -> BenchReport:
    """Time scoring ``count`` candidates with and without the perception cache.

    Without the cache every candidate re-encodes the observation as part of
    its own sequence (batched in chunks of ``NO_CACHE_CHUNK`` to bound
    memory); with it, one ``pre_encode`` is followed by action-only scoring.
    """
    rows = []
    for count in counts:
        acts = probe_actions(count, prm.cfg.d_dir, seed)

        def nocache():
            parts = [prm.forward_full(obs, acts[i:i + NO_CACHE_CHUNK])
                     for i in range(0, count, NO_CACHE_CHUNK)]
            return np.concatenate([p[0] for p in parts])

        def cached():
            cache = prm.pre_encode(obs)
            return prm.score_arrays(cache, acts)[0]

        t_full, r_full = _median_time(nocache, reps, warmup)
        t_cache, r_cache = _median_time(cached, reps, warmup)
        rows.append(BenchRow(int(count), t_full, t_cache, float(np.max(np.abs(r_full - r_cache)))))
    protocol = f"median of {reps} after {warmup} warmups, perf_counter, no-cache chunk {NO_CACHE_CHUNK}"
    return BenchReport(rows, hardware_note(), protocol)


# ---------------------------------------------------------------- direction field

@dataclass
class DirectionFieldDump:
    bounds: tuple
    resolution: tuple
    points: np.ndarray
    directions: np.ndarray
    rewards: np.ndarray
    degenerate: np.ndarray = field(default=None)

    COLUMNS = ("x", "y", "u_x", "u_y", "reward")

    def csv_rows(self) -> list[list]:
        return [[p[0], p[1], u[0], u[1], r] for p, u, r in zip(self.points, self.directions, self.rewards)]

    def to_svg(self, target=None) -> str:
        return quiver_svg(self.points, self.directions, self.bounds, self.rewards, target)

    def alignment(self, target) -> float:
        """Mean cosine between predicted directions and the true direction to ``target``."""
        diff = np.asarray(target, dtype=np.float64)[None] - self.points
        n = np.linalg.norm(diff, axis=1)
        ok = n > 1e-9
        cos = np.sum(self.directions[ok] * diff[ok] / n[ok, None], axis=1)
        return float(np.mean(cos))


def probe_grid(bounds, resolution) -> np.ndarray:
    """Cell-centred probe points; deterministic in ``bounds`` and ``resolution``."""
    (x0, x1), (y0, y1) = bounds
    nx, ny = resolution
    if nx < 1 or ny < 1:
        raise ValueError("resolution must be positive")
    xs = x0 + (np.arange(nx) + 0.5) * (x1 - x0) / nx
    ys = y0 + (np.arange(ny) + 0.5) * (y1 - y0) / ny
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def dump_direction_field(scorer, obs: Observation, bounds=((-0.2, 0.2), (-0.2, 0.2)),
                         resolution=(15, 15), gripper: float = -1.0) -> DirectionFieldDump:
    d_dir = scorer.cfg.d_dir if hasattr(scorer, "cfg") else scorer.d_dir
    if d_dir != 2:
        raise ValueError("direction fields are only supported for d_dir = 2")
    pts = probe_grid(bounds, resolution)
    actions = [Action(p, gripper) for p in pts]
    cache = scorer.pre_encode(obs)
    r, u, deg = scorer.score_arrays(cache, actions)
    return DirectionFieldDump(tuple(map(tuple, bounds)), tuple(resolution), pts,
                              np.asarray(u), np.asarray(r), np.asarray(deg))
