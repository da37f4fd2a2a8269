"""Navigation world: scene data, true state, sensor-limited observation,
termination and reward."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Pose2D, relative_polar, relative_polar_many

N_PED = 3
# d_g, phi_g | v_T, v_R | 3 x (d, phi) | d_com, phi_com | 9 obstacle entries
STATE_DIM = 2 + 2 + 2 * N_PED + 2 + 9

GOAL_REWARD = 10000.0
FAIL_REWARD = -10000.0
TURN_PENALTY = 10.0


class TerminationCause(enum.Enum):
    NONE = "None"
    GOAL_REACHED = "RG"
    HIT_PEDESTRIAN = "HP"
    HIT_COMPANION = "HC"
    HIT_OBSTACLE = "HO"
    STRAY = "LC"

    @property
    def terminal(self) -> bool:
        return self is not TerminationCause.NONE


@dataclass(frozen=True)
class RobotLimits:
    v_t_max: float = 0.7
    v_r_max: float = math.pi / 3
    dt: float = 0.1


@dataclass(frozen=True)
class SensorModel:
    """Detector fields of view, ranges and relative noise levels."""

    ped_phi_max: float = 2 * math.pi / 3
    ped_phi_min: float = -2 * math.pi / 3
    ped_range: float = 4.0
    obs_phi_max: float = 2 * math.pi / 3
    obs_phi_min: float = -2 * math.pi / 3
    obs_range: float = 4.0
    c_ped: float = 0.01
    c_com: float = 0.01
    c_obs: float = 0.01
    eps_rho: float = 0.1
    obs_radius: float = 4.0

    def __post_init__(self) -> None:
        for lo, hi in ((self.ped_phi_min, self.ped_phi_max), (self.obs_phi_min, self.obs_phi_max)):
            if not lo < 0.0 < hi:
                raise ValueError("field of view must satisfy phi_min < 0 < phi_max")
        if min(self.ped_range, self.obs_range, self.obs_radius, self.eps_rho) <= 0:
            raise ValueError("ranges and eps_rho must be positive")
        if min(self.c_ped, self.c_com, self.c_obs) < 0:
            raise ValueError("noise coefficients must be non-negative")

    def noiseless(self) -> "SensorModel":
        return replace(self, c_ped=0.0, c_com=0.0, c_obs=0.0)


@dataclass(frozen=True)
class Thresholds:
    goal: float = 0.8
    ped: float = 0.4
    com: float = 0.4
    obs: float = 0.2
    stray: float = 2.0


class OccupancyGrid:
    """Binary occupancy map. Row ``i`` runs along +y, column ``j`` along +x;
    ``origin`` is the centre of cell (0, 0)."""

    def __init__(self, cells, resolution: float, origin=(0.0, 0.0)):
        cells = np.asarray(cells, dtype=bool)
        if cells.ndim != 2 or cells.size == 0:
            raise ValueError("occupancy cells must be a non-empty 2-D array")
        if not resolution > 0:
            raise ValueError("resolution must be positive")
        if cells.all():
            raise ValueError("occupancy grid has no free cell")
        self.cells = cells
        self.cells.setflags(write=False)
        self.resolution = float(resolution)
        self.origin = (float(origin[0]), float(origin[1]))
        rows, cols = np.nonzero(cells)
        self._occupied_idx = (rows, cols)

    @classmethod
    def free(cls, width: float, height: float, resolution: float = 0.1, origin=(0.0, 0.0)):
        cols = max(1, int(round(width / resolution)))
        rows = max(1, int(round(height / resolution)))
        return cls(np.zeros((rows, cols), dtype=bool), resolution, origin)

    @property
    def shape(self) -> tuple[int, int]:
        return self.cells.shape

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        half = 0.5 * self.resolution
        rows, cols = self.cells.shape
        x0, y0 = self.origin
        return (x0 - half, y0 - half, x0 + (cols - 0.5) * self.resolution, y0 + (rows - 0.5) * self.resolution)

    def corners(self) -> np.ndarray:
        xmin, ymin, xmax, ymax = self.bounds
        return np.array([[xmin, ymin], [xmax, ymin], [xmin, ymax], [xmax, ymax]])

    def contains(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        xmin, ymin, xmax, ymax = self.bounds
        return (pts[:, 0] >= xmin) & (pts[:, 0] <= xmax) & (pts[:, 1] >= ymin) & (pts[:, 1] <= ymax)

    def cell_centers(self, rows, cols) -> np.ndarray:
        rows = np.asarray(rows)
        cols = np.asarray(cols)
        return np.column_stack(
            (self.origin[0] + cols * self.resolution, self.origin[1] + rows * self.resolution)
        ).astype(float)

    def occupied_centers(self) -> np.ndarray:
        return self.cell_centers(*self._occupied_idx)

    def farthest_corner(self, point) -> np.ndarray:
        c = self.corners()
        d = np.hypot(c[:, 0] - point[0], c[:, 1] - point[1])
        return c[int(np.argmax(d))]


@dataclass
class Trajectory:
    """A replayed pedestrian track; ``positions[i]`` is at frame ``start_frame + i``."""

    ped_id: int
    start_frame: int
    positions: np.ndarray

    def __post_init__(self) -> None:
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        if len(self.positions) < 2:
            raise ValueError(f"trajectory {self.ped_id} has fewer than 2 samples")
        if not np.isfinite(self.positions).all():
            raise ValueError(f"trajectory {self.ped_id} has non-finite positions")

    @property
    def end_frame(self) -> int:
        return self.start_frame + len(self.positions) - 1

    def at(self, frame: int) -> np.ndarray:
        """Position at ``frame``, frozen at the ends of the recording."""
        idx = min(max(frame - self.start_frame, 0), len(self.positions) - 1)
        return self.positions[idx]


@dataclass
class EnvironmentSpec:
    name: str
    trajectories: dict[int, Trajectory]
    occupancy: OccupancyGrid
    companion_candidates: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        for pid in self.companion_candidates:
            if pid not in self.trajectories:
                raise ValueError(f"companion candidate {pid} is not a trajectory id in {self.name}")
        for traj in self.trajectories.values():
            if not self.occupancy.contains(traj.positions).all():
                raise ValueError(f"trajectory {traj.ped_id} leaves the map bounds of {self.name}")


@dataclass
class WorldState:
    """Fixed-layout navigation vector shared by the true state and the observation."""

    d_g: float
    phi_g: float
    v_t: float
    v_r: float
    p_ped: np.ndarray  # (N_PED, 2) as (d, phi), nearest first
    p_com: np.ndarray  # (2,)
    p_obs: np.ndarray  # (9,)

    def vector(self) -> np.ndarray:
        return np.concatenate(
            ([self.d_g, self.phi_g, self.v_t, self.v_r], np.ravel(self.p_ped), self.p_com, self.p_obs)
        )


class Observation(WorldState):
    pass


def obstacle_points_near(grid: OccupancyGrid, pose: Pose2D, radius: float) -> np.ndarray:
    """Centres of occupied cells within ``radius`` of the robot (inclusive)."""
    if not radius > 0:
        raise ValueError("radius must be positive")
    res = grid.resolution
    rows, cols = grid.shape
    j0 = max(int(math.floor((pose.x - radius - grid.origin[0]) / res)), 0)
    j1 = min(int(math.ceil((pose.x + radius - grid.origin[0]) / res)), cols - 1)
    i0 = max(int(math.floor((pose.y - radius - grid.origin[1]) / res)), 0)
    i1 = min(int(math.ceil((pose.y + radius - grid.origin[1]) / res)), rows - 1)
    if j0 > j1 or i0 > i1:
        return np.empty((0, 2))
    ii, jj = np.nonzero(grid.cells[i0 : i1 + 1, j0 : j1 + 1])
    if ii.size == 0:
        return np.empty((0, 2))
    pts = grid.cell_centers(ii + i0, jj + j0)
    d = np.hypot(pts[:, 0] - pose.x, pts[:, 1] - pose.y)
    return pts[d <= radius]


def _sector_entries(d, phi, eps_rho: float, fallback: float):
    """Sector summary plus the distance slots that hold a real measurement."""
    out = np.array([fallback, fallback, math.pi / 2, fallback, -math.pi / 2,
                    fallback, math.pi / 2, fallback, -math.pi / 2])
    measured = []
    front = np.abs(phi) <= eps_rho
    if front.any():
        out[0] = d[front].min()
        measured.append(0)
    for mask, lo_slot, hi_slot in ((phi > eps_rho, 1, 5), (phi < -eps_rho, 3, 7)):
        if mask.any():
            ds, ps = d[mask], phi[mask]
            k_min, k_max = int(np.argmin(ds)), int(np.argmax(ds))
            out[lo_slot : lo_slot + 2] = ds[k_min], ps[k_min]
            out[hi_slot : hi_slot + 2] = ds[k_max], ps[k_max]
            measured += [lo_slot, hi_slot]
    return out, measured


def compute_p_obs(pose: Pose2D, points: np.ndarray, eps_rho: float, fallback: float) -> np.ndarray:
    """True 9-entry obstacle summary: nearest ahead, nearest/farthest per side.

    Empty sectors report ``fallback`` distance at +-pi/2 (sides) so the policy
    reads them as free space.
    """
    if not eps_rho > 0:
        raise ValueError("eps_rho must be positive")
    d, phi = relative_polar_many(pose, points)
    return _sector_entries(d, phi, eps_rho, fallback)[0]


def compute_p_ped(pose: Pose2D, ped_positions, grid: OccupancyGrid, n_ped: int = N_PED):
    """Nearest ``n_ped`` pedestrians as (d, phi) pairs, padded with dummies.

    Returns ``(pairs, positions, real)`` where ``real`` flags non-dummy rows.
    Dummies sit on the map corner farthest from the robot.
    """
    pts = np.asarray(ped_positions, dtype=float).reshape(-1, 2)
    d, phi = relative_polar_many(pose, pts)
    order = np.argsort(d, kind="stable")[:n_ped]
    pairs = np.empty((n_ped, 2))
    positions = np.empty((n_ped, 2))
    real = np.zeros(n_ped, dtype=bool)
    k = len(order)
    pairs[:k, 0], pairs[:k, 1] = d[order], phi[order]
    positions[:k] = pts[order]
    real[:k] = True
    if k < n_ped:
        corner = grid.farthest_corner(pose.position)
        pairs[k:] = relative_polar(pose, corner)
        positions[k:] = corner
    return pairs, positions, real


def _noisy(d: float, coeff: float, rng) -> float:
    if rng is None or coeff == 0.0:
        return d
    return max(0.0, d + rng.normal(0.0, coeff * d))


def observe_peds(p_ped: np.ndarray, sensor: SensorModel, rng=None) -> np.ndarray:
    """Mask pedestrians outside the detector field of view and add range noise."""
    out = np.empty_like(np.asarray(p_ped, dtype=float))
    for j, (d, phi) in enumerate(p_ped):
        if sensor.ped_phi_min <= phi <= sensor.ped_phi_max and d <= sensor.ped_range:
            out[j] = _noisy(d, sensor.c_ped, rng), phi
        else:
            out[j] = sensor.ped_range, math.pi
    return out


def observe_obs(pose: Pose2D, points: np.ndarray, sensor: SensorModel, rng=None) -> np.ndarray:
    """Obstacle summary restricted to the detector field of view, with range noise."""
    d, phi = relative_polar_many(pose, points)
    visible = (phi >= sensor.obs_phi_min) & (phi <= sensor.obs_phi_max) & (d <= sensor.obs_range)
    out, measured = _sector_entries(d[visible], phi[visible], sensor.eps_rho, sensor.obs_range)
    for slot in measured:
        out[slot] = _noisy(out[slot], sensor.c_obs, rng)
    return out


def observe_com(p_com, sensor: SensorModel, rng=None) -> np.ndarray:
    d, phi = float(p_com[0]), float(p_com[1])
    return np.array([_noisy(d, sensor.c_com, rng), phi])


def check_termination(
    d_g: float,
    ped_distances,
    d_com: float,
    p_obs: np.ndarray,
    thresholds: Thresholds = Thresholds(),
    companion_active: bool = True,
) -> TerminationCause:
    """Evaluate terminal conditions on true distances.

    Precedence: pedestrian hit, companion hit, obstacle hit, stray, goal.
    """
    peds = np.asarray(ped_distances, dtype=float)
    if peds.size and peds.min() <= thresholds.ped:
        return TerminationCause.HIT_PEDESTRIAN
    if companion_active and d_com <= thresholds.com:
        return TerminationCause.HIT_COMPANION
    if min(p_obs[0], p_obs[1], p_obs[3]) <= thresholds.obs:
        return TerminationCause.HIT_OBSTACLE
    if companion_active and d_com >= thresholds.stray:
        return TerminationCause.STRAY
    if d_g <= thresholds.goal:
        return TerminationCause.GOAL_REACHED
    return TerminationCause.NONE


def reward(cause: TerminationCause, v_r: float) -> float:
    if cause is TerminationCause.GOAL_REACHED:
        return GOAL_REWARD
    if cause.terminal:
        return FAIL_REWARD
    return -TURN_PENALTY * abs(v_r)


def scale_vector(
    vec: np.ndarray,
    sensor: SensorModel,
    limits: RobotLimits,
    goal_scale: float = 10.0,
) -> np.ndarray:
    """Map a state/observation vector (or a stack of them) to O(1) network inputs.

    Distances are divided by their sensing range, angles by pi and velocities
    by their bounds.
    """
    scale = np.empty(STATE_DIM)
    scale[0] = goal_scale
    scale[1] = math.pi
    scale[2] = limits.v_t_max
    scale[3] = limits.v_r_max
    scale[4 : 4 + 2 * N_PED : 2] = sensor.ped_range
    scale[5 : 4 + 2 * N_PED : 2] = math.pi
    k = 4 + 2 * N_PED
    scale[k] = sensor.ped_range
    scale[k + 1] = math.pi
    obs = k + 2
    scale[obs] = sensor.obs_range
    scale[obs + 1 :: 2] = sensor.obs_range
    scale[obs + 2 :: 2] = math.pi
    return np.asarray(vec, dtype=float) / scale
