"""Synthetic scene families for smoke tests and miniature experiments."""

from __future__ import annotations

import math

import numpy as np

from .world import EnvironmentSpec, OccupancyGrid, Trajectory

FRAME_GAP = 100_000  # keeps recordings of independent routes from overlapping in time


def straight_walk(pid: int, start_frame: int, p0, p1, speed: float, dt: float = 0.1) -> Trajectory:
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    n = max(2, int(math.ceil(np.hypot(*(p1 - p0)) / (speed * dt))) + 1)
    return Trajectory(pid, start_frame, np.linspace(p0, p1, n))


def goal_only_scene(routes: int = 8, seed: int = 0, size: float = 20.0, length=(3.0, 6.0)) -> EnvironmentSpec:
    """Open map with ``routes`` straight walks that never overlap in time.

    Used with non-SCN episodes only, so there are no pedestrians, no
    obstacles and the companion is always synthesized.
    """
    rng = np.random.default_rng(seed)
    trajs = {}
    for k in range(routes):
        lo = size / 2 - 3.0
        start = rng.uniform(lo, size - lo, size=2)
        ang = rng.uniform(-math.pi, math.pi)
        ln = rng.uniform(*length)
        goal = start + ln * np.array([math.cos(ang), math.sin(ang)])
        trajs[k + 1] = straight_walk(k + 1, k * FRAME_GAP, start, goal, 1.0)
    grid = OccupancyGrid.free(size, size, 0.1)
    return EnvironmentSpec(f"goal-only-{seed}", trajs, grid, sorted(trajs))


def corridor_grid(resolution: float = 0.1) -> OccupancyGrid:
    """An L-shaped corridor, 4 m wide: east along ``y`` in (0.3, 4.3) up to
    ``x = 14.3``, then north through ``x`` in (10.3, 14.3)."""
    free = OccupancyGrid.free(14.6, 14.6, resolution)
    xs = free.origin[0] + np.arange(free.shape[1]) * resolution
    ys = free.origin[1] + np.arange(free.shape[0]) * resolution
    X, Y = np.meshgrid(xs, ys)
    east = (X > 0.3) & (X < 14.3) & (Y > 0.3) & (Y < 4.3)
    north = (X > 10.3) & (X < 14.3) & (Y > 0.3) & (Y < 14.3)
    return OccupancyGrid(~(east | north), resolution, free.origin)


def _polyline(points, speed: float, dt: float = 0.1) -> np.ndarray:
    pts = [np.asarray(points[0], float)[None]]
    for a, b in zip(points[:-1], points[1:]):
        a, b = np.asarray(a, float), np.asarray(b, float)
        n = max(2, int(math.ceil(np.hypot(*(b - a)) / (speed * dt))) + 1)
        pts.append(np.linspace(a, b, n)[1:])
    return np.concatenate(pts)


def corridor_scene(seed: int = 0, companion_speed=(0.45, 0.6), ped_speed=(0.8, 1.2)) -> EnvironmentSpec:
    """Companion walks down an L-shaped corridor and round the corner while
    two pedestrians come the other way along the first leg.

    The companion (id 1) is the only candidate; the robot starts where the
    companion starts and must arrive where it stops, which is out of sight
    behind the corner.
    """
    rng = np.random.default_rng(seed)
    grid = corridor_grid()
    y_c = 2.3 + rng.uniform(-0.5, 0.5)
    x_turn = 12.3 + rng.uniform(-0.5, 0.5)
    goal = (x_turn + rng.uniform(-0.3, 0.3), 12.0 + rng.uniform(-0.5, 0.5))
    path = _polyline([(1.5, y_c), (x_turn - 1.0, y_c), (x_turn, y_c + 1.0), goal], rng.uniform(*companion_speed))
    trajs = {1: Trajectory(1, 0, path)}
    for pid in (2, 3):
        y = 2.3 + rng.uniform(-1.4, 1.4)
        delay = int(rng.integers(0, 80))
        trajs[pid] = straight_walk(pid, delay, (13.5, y), (0.8, y + rng.uniform(-0.4, 0.4)), rng.uniform(*ped_speed))
    return EnvironmentSpec(f"corridor-{seed}", trajs, grid, [1])


def corridor_family(n: int, seed: int = 0) -> list[EnvironmentSpec]:
    seeds = np.random.SeedSequence(seed).generate_state(n)
    return [corridor_scene(int(s)) for s in seeds]
