"""Sampling-based reciprocal velocity obstacle planner used as a baseline.

Every agent near the robot, companion included, is treated as a disk that
shares the avoidance effort. Candidate velocities are scored by
``w / ttc + |candidate - v_pref|`` and the cheapest one is chosen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .episode import Episode, Mode, Scenario, SceneReplay, SimConfig, StepContext, run_episode
from .geometry import wrap_angle
from .world import EnvironmentSpec, OccupancyGrid, RobotLimits

GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


@dataclass(frozen=True)
class RvoConfig:
    n_candidates: int = 200
    ttc_weight: float = 1.0  # seconds times metres per second
    heading_gain: float = 2.0
    agent_radius: float = 0.2
    robot_radius: float = 0.2
    obstacle_margin: float = 0.05
    safety_margin: float = 0.1  # added to other agents' radii
    obstacle_horizon: float = 2.0  # seconds; farther wall points are ignored
    pref_speed: Optional[float] = None  # defaults to the robot's top speed
    noisy: bool = True

    def __post_init__(self):
        if self.n_candidates < 1:
            raise ValueError("need at least one candidate velocity")
        if self.ttc_weight < 0 or self.heading_gain <= 0:
            raise ValueError("ttc weight must be non-negative and heading gain positive")
        if self.agent_radius <= 0 or self.robot_radius <= 0 or self.obstacle_margin < 0:
            raise ValueError("radii must be positive")


@dataclass(frozen=True)
class AgentDisk:
    position: np.ndarray
    velocity: np.ndarray
    radius: float
    pref_speed: float
    goal: np.ndarray
    max_speed: Optional[float] = None

    def __post_init__(self):
        for name in ("position", "velocity", "goal"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(2))
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if not self.pref_speed >= 0:
            raise ValueError("preferred speed must be non-negative")

    @property
    def speed_limit(self) -> float:
        return self.pref_speed if self.max_speed is None else self.max_speed

    def preferred_velocity(self, dt: float) -> np.ndarray:
        """Toward the goal at the preferred speed, slowing so as not to overshoot."""
        to_goal = self.goal - self.position
        dist = math.hypot(*to_goal)
        if dist == 0.0:
            return np.zeros(2)
        return to_goal / dist * min(self.pref_speed, dist / dt)


def candidate_velocities(v_pref: np.ndarray, v_max: float, n: int) -> np.ndarray:
    """``n`` sunflower-spiral samples of the speed disk, rotated into the
    frame of ``v_pref``, followed by ``v_pref`` itself and zero."""
    i = np.arange(n)
    r = v_max * np.sqrt((i + 0.5) / n)
    ang = i * GOLDEN_ANGLE
    if np.any(v_pref):
        ang = ang + math.atan2(v_pref[1], v_pref[0])
    disk = np.column_stack((r * np.cos(ang), r * np.sin(ang)))
    return np.vstack((disk, v_pref, np.zeros(2)))


def time_to_collision(rel_pos: np.ndarray, rel_vel: np.ndarray, radius: np.ndarray) -> np.ndarray:
    """First time at which ``|rel_pos - rel_vel * t| <= radius``.

    ``rel_pos`` is ``(K, 2)`` (others minus self), ``rel_vel`` is ``(M, K, 2)``
    (self minus other) and the result is ``(M, K)``. Already-overlapping pairs
    give 0 when closing in and infinity when separating.
    """
    dist2 = np.sum(rel_pos**2, axis=-1)
    r2 = radius**2
    dot = np.einsum("mkd,kd->mk", rel_vel, rel_pos)
    vv = np.sum(rel_vel**2, axis=-1)
    c = dist2 - r2
    disc = dot**2 - vv * c
    ttc = np.full(dot.shape, np.inf)
    hit = (dot > 0) & (disc >= 0) & (vv > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        t = (dot - np.sqrt(np.where(hit, disc, 0.0))) / np.where(hit, vv, 1.0)
    ttc[hit] = t[hit]
    overlap = np.broadcast_to(c <= 0, dot.shape)
    ttc[overlap] = np.where(dot[overlap] > 0, 0.0, np.inf)
    return ttc


def rvo_step(
    agent: AgentDisk,
    others: Sequence[AgentDisk],
    obstacles,
    dt: float,
    config: RvoConfig = RvoConfig(),
    obstacle_radius: Optional[float] = None,
) -> np.ndarray:
    """Pick the candidate velocity with the lowest RVO penalty.

    Other agents are tested reciprocally (``2c - v_self`` against their
    velocity); obstacle points are static disks of ``obstacle_radius``
    (default: the agent radius plus the configured margin).
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    v_pref = agent.preferred_velocity(dt)
    cands = candidate_velocities(v_pref, agent.speed_limit, config.n_candidates)
    dev = np.hypot(*(cands - v_pref).T)
    ttc = np.full(len(cands), np.inf)
    if others:
        pos = np.array([o.position for o in others]) - agent.position
        vel = np.array([o.velocity for o in others])
        rad = np.array([o.radius for o in others]) + agent.radius
        rel_vel = (2.0 * cands - agent.velocity)[:, None, :] - vel[None, :, :]
        ttc = np.minimum(ttc, time_to_collision(pos, rel_vel, rad).min(axis=1))
    obstacles = np.asarray(obstacles, dtype=float).reshape(-1, 2)
    if len(obstacles):
        r_obs = agent.radius + config.obstacle_margin if obstacle_radius is None else obstacle_radius
        pos = obstacles - agent.position
        rel_vel = np.broadcast_to(cands[:, None, :], (len(cands), len(pos), 2))
        ttc = np.minimum(ttc, time_to_collision(pos, rel_vel, np.full(len(pos), r_obs)).min(axis=1))
    with np.errstate(divide="ignore"):
        penalty = np.where(ttc > 0, config.ttc_weight / ttc, np.inf) + dev
    if np.isfinite(penalty).any():
        k = int(np.argmin(penalty))
    else:
        # nothing is collision-free: delay the impact as long as possible
        k = int(np.lexsort((dev, -ttc))[0])
    return cands[k].copy()


def unicycle_command(v: np.ndarray, heading: float, limits: RobotLimits, gain: float = 2.0) -> np.ndarray:
    """Project a holonomic velocity onto (v_T, v_R) for a synchro-drive robot."""
    speed = math.hypot(v[0], v[1])
    if speed == 0.0:
        return np.zeros(2)
    delta = wrap_angle(math.atan2(v[1], v[0]) - heading)
    v_t = min(max(speed * math.cos(delta), 0.0), limits.v_t_max)
    v_r = min(max(gain * delta, -limits.v_r_max), limits.v_r_max)
    return np.array([v_t, v_r])


def _noisy_position(origin: np.ndarray, point: np.ndarray, coeff: float, rng) -> np.ndarray:
    """Range noise along the line of sight, as for the robot's detectors."""
    rel = point - origin
    d = math.hypot(*rel)
    if d == 0.0 or coeff == 0.0:
        return point.copy()
    d_noisy = max(0.0, d + rng.normal(0.0, coeff * d))
    return origin + rel * (d_noisy / d)


def boundary_mask(grid: OccupancyGrid) -> np.ndarray:
    """Occupied cells with at least one free 4-neighbour.

    Interior wall cells can only be reached through these, so the planner
    tests time to collision against the boundary alone.
    """
    occ = grid.cells
    free = np.pad(~occ, 1, constant_values=False)
    touches = free[:-2, 1:-1] | free[2:, 1:-1] | free[1:-1, :-2] | free[1:-1, 2:]
    return occ & touches


class RvoController:
    """Drives the robot with :func:`rvo_step` from noisy agent positions."""

    def __init__(self, config: RvoConfig = RvoConfig()):
        self.config = config
        self._boundary: dict = {}
        self.reset()

    def reset(self) -> None:
        self._replay: Optional[SceneReplay] = None
        self._prev: dict = {}

    def _relevant_obstacles(self, grid: OccupancyGrid, points: np.ndarray, origin: np.ndarray, reach: float):
        if len(points) == 0:
            return points
        mask = self._boundary.get(id(grid))
        if mask is None:
            mask = self._boundary[id(grid)] = boundary_mask(grid)
        idx = np.rint((points - np.asarray(grid.origin)) / grid.resolution).astype(int)
        keep = mask[idx[:, 1], idx[:, 0]]
        keep &= np.hypot(*(points - origin).T) <= reach
        return points[keep]

    def act(self, ctx: StepContext):
        cfg, sim = self.config, ctx.sim
        if self._replay is None or self._replay.scenario is not ctx.scenario:
            self._replay = SceneReplay(ctx.env, ctx.scenario)
            self._prev = {}
        snap = ctx.snapshot
        pose = snap.pose
        me_pos = np.array([pose.x, pose.y])
        dt = sim.limits.dt

        tracked = []
        ids, positions = self._replay.pedestrians_with_ids(ctx.step)
        for pid, q in zip(ids, positions):
            tracked.append((("ped", int(pid)), q, sim.sensor.c_ped))
        if ctx.scenario.mode is Mode.SCN:
            tracked.append((("com", 0), snap.companion, sim.sensor.c_com))

        others, seen = [], {}
        for key, q, coeff in tracked:
            q_obs = _noisy_position(me_pos, np.asarray(q, float), coeff, ctx.rng) if cfg.noisy else np.asarray(q, float)
            prev = self._prev.get(key)
            vel = (q_obs - prev) / dt if prev is not None else np.zeros(2)
            seen[key] = q_obs
            others.append(AgentDisk(q_obs, vel, cfg.agent_radius + cfg.safety_margin, 0.0, q_obs))
        self._prev = seen

        pref = sim.limits.v_t_max if cfg.pref_speed is None else cfg.pref_speed
        v_self = snap.state.v_t * np.array([math.cos(pose.heading), math.sin(pose.heading)])
        me = AgentDisk(me_pos, v_self, cfg.robot_radius, pref, np.array(ctx.scenario.goal), sim.limits.v_t_max)
        reach = sim.limits.v_t_max * cfg.obstacle_horizon + cfg.robot_radius + cfg.obstacle_margin
        obstacles = self._relevant_obstacles(ctx.env.occupancy, snap.obstacles, me_pos, reach)
        v = rvo_step(me, others, obstacles, dt, cfg)
        return unicycle_command(v, pose.heading, sim.limits, cfg.heading_gain), 0.0


def rvo_rollout(
    env: EnvironmentSpec,
    scenario: Scenario,
    sim: SimConfig,
    rng,
    config: RvoConfig = RvoConfig(),
    episode_id: int = 0,
) -> Episode:
    return run_episode(env, scenario, RvoController(config), sim, rng, episode_id)
