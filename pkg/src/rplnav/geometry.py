"""Planar geometry and synchro-drive kinematics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Below this rotational speed the straight-line update is used.
EPS_VR = 1e-6


def wrap_angle(theta: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    if not math.isfinite(theta):
        raise ValueError(f"cannot wrap non-finite angle {theta!r}")
    wrapped = math.remainder(theta, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    heading: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "heading", wrap_angle(self.heading))

    @property
    def position(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class VelocityCommand:
    v_t: float
    v_r: float

    def clamped(self, v_t_max: float, v_r_max: float) -> "VelocityCommand":
        return VelocityCommand(
            min(max(self.v_t, 0.0), v_t_max),
            min(max(self.v_r, -v_r_max), v_r_max),
        )


def step_pose(pose: Pose2D, cmd: VelocityCommand, dt: float) -> Pose2D:
    """Advance ``pose`` for ``dt`` seconds under constant velocities.

    Follows a circular arc when the rotational speed is non-negligible and a
    straight segment otherwise.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    phi = pose.heading
    v_t, v_r = cmd.v_t, cmd.v_r
    if abs(v_r) > EPS_VR:
        dx = -v_t * (math.sin(phi) - math.sin(phi + v_r * dt)) / v_r
        dy = v_t * (math.cos(phi) - math.cos(phi + v_r * dt)) / v_r
    else:
        dx = v_t * math.cos(phi) * dt
        dy = v_t * math.sin(phi) * dt
    return Pose2D(pose.x + dx, pose.y + dy, phi + v_r * dt)


def relative_polar(pose: Pose2D, point) -> tuple[float, float]:
    """Distance and bearing (relative to the heading) of a world point."""
    px, py = float(point[0]), float(point[1])
    if not (math.isfinite(px) and math.isfinite(py)):
        raise ValueError("point must be finite")
    dx, dy = px - pose.x, py - pose.y
    d = math.hypot(dx, dy)
    if d == 0.0:
        return 0.0, 0.0
    return d, wrap_angle(math.atan2(dy, dx) - pose.heading)


def relative_polar_many(pose: Pose2D, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`relative_polar` over an ``(n, 2)`` array."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    dx = pts[:, 0] - pose.x
    dy = pts[:, 1] - pose.y
    d = np.hypot(dx, dy)
    phi = np.arctan2(dy, dx) - pose.heading
    phi = np.arctan2(np.sin(phi), np.cos(phi))
    phi[phi <= -math.pi] = math.pi
    phi[d == 0.0] = 0.0
    return d, phi
