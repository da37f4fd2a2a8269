"""Role-playing episodes: the robot replaces one recorded pedestrian and
navigates to that pedestrian's destination among the replayed crowd."""

from __future__ import annotations

import csv
import enum
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence

import numpy as np

from .geometry import Pose2D, VelocityCommand, relative_polar, step_pose
from .nets import PolicyNet, log_prob
from .world import (
    N_PED,
    STATE_DIM,
    EnvironmentSpec,
    Observation,
    RobotLimits,
    SensorModel,
    TerminationCause,
    Thresholds,
    WorldState,
    check_termination,
    compute_p_obs,
    compute_p_ped,
    obstacle_points_near,
    observe_com,
    observe_obs,
    observe_peds,
    reward,
    scale_vector,
)


class Mode(enum.Enum):
    SCN = "scn"
    NON_SCN = "nonscn"


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    sensor: SensorModel = SensorModel()
    limits: RobotLimits = RobotLimits()
    thresholds: Thresholds = Thresholds()
    max_steps: int = 1000
    scn_prob: float = 0.5
    companion_gap: float = 0.6
    synth_com_distance: float = 0.8
    goal_scale: float = 10.0


@dataclass(frozen=True)
class Scenario:
    env_index: int
    traj_id: int
    start: tuple[float, float]
    goal: tuple[float, float]
    heading: float
    mode: Mode
    start_frame: int
    companion_start: Optional[int]
    pedestrian_ids: tuple[int, ...]


def companion_start_index(positions: np.ndarray, gap: float) -> Optional[int]:
    """First index whose position is at least ``gap`` from the start, or None
    when only the final sample (or none) qualifies."""
    d = np.hypot(*(positions - positions[0]).T)
    idx = np.nonzero(d >= gap)[0]
    if idx.size == 0 or idx[0] >= len(positions) - 1:
        return None
    return int(idx[0])


def sample_scenario(
    environments: Sequence[EnvironmentSpec],
    rng,
    mode: Optional[Mode] = None,
    sim: SimConfig = SimConfig(),
) -> Scenario:
    eligible = [j for j, env in enumerate(environments) if env.companion_candidates]
    if not eligible:
        raise ConfigurationError("no environment has a companion candidate trajectory")
    j = eligible[int(rng.integers(len(eligible)))]
    env = environments[j]
    k = env.companion_candidates[int(rng.integers(len(env.companion_candidates)))]
    drawn = Mode.SCN if rng.random() < sim.scn_prob else Mode.NON_SCN
    if mode is None:
        mode = drawn
    traj = env.trajectories[k]
    start = traj.positions[0]
    goal = traj.positions[-1]
    heading = math.atan2(goal[1] - start[1], goal[0] - start[0])
    t0 = None
    if mode is Mode.SCN:
        t0 = companion_start_index(traj.positions, sim.companion_gap)
        if t0 is None:
            mode = Mode.NON_SCN
    first, last = traj.start_frame, traj.start_frame + sim.max_steps
    peds = tuple(
        sorted(pid for pid, t in env.trajectories.items() if pid != k and t.end_frame >= first and t.start_frame <= last)
    )
    return Scenario(j, k, (float(start[0]), float(start[1])), (float(goal[0]), float(goal[1])),
                    heading, mode, traj.start_frame, t0, peds)


class SceneReplay:
    """Pedestrian and companion positions over an episode.

    Pedestrians appear at their first recorded frame and freeze at their last.
    """

    def __init__(self, env: EnvironmentSpec, scenario: Scenario):
        self.env = env
        self.scenario = scenario
        trajs = [env.trajectories[p] for p in scenario.pedestrian_ids]
        self._starts = np.array([t.start_frame for t in trajs], dtype=int)
        if trajs:
            lmax = max(len(t.positions) for t in trajs)
            pad = np.empty((len(trajs), lmax, 2))
            for n, t in enumerate(trajs):
                pad[n, : len(t.positions)] = t.positions
                pad[n, len(t.positions) :] = t.positions[-1]
            self._pad = pad
        else:
            self._pad = np.empty((0, 1, 2))
        self._companion = env.trajectories[scenario.traj_id].positions

    def pedestrians_with_ids(self, step: int) -> tuple[np.ndarray, np.ndarray]:
        """Ids and positions of the pedestrians present at ``step``."""
        frame = self.scenario.start_frame + step
        idx = frame - self._starts
        present = idx >= 0
        if not present.any():
            return np.empty(0, dtype=int), np.empty((0, 2))
        rows = np.nonzero(present)[0]
        cols = np.minimum(idx[present], self._pad.shape[1] - 1)
        return np.asarray(self.scenario.pedestrian_ids, dtype=int)[rows], self._pad[rows, cols]

    def pedestrians(self, step: int) -> np.ndarray:
        return self.pedestrians_with_ids(step)[1]

    def companion(self, step: int) -> Optional[np.ndarray]:
        if self.scenario.mode is not Mode.SCN:
            return None
        i = min(self.scenario.companion_start + step, len(self._companion) - 1)
        return self._companion[i]


def synthesize_companion(phi_g: float, distance: float = 0.8) -> tuple[np.ndarray, np.ndarray]:
    """Virtual companion walking beside the robot toward the goal: (true, observed)."""
    p = np.array([distance, phi_g])
    return p, p.copy()


@dataclass
class Snapshot:
    """Ground truth at one instant plus the world positions behind it."""

    state: WorldState
    pose: Pose2D
    peds: np.ndarray  # all present pedestrians
    ped_nearest: np.ndarray  # (N_PED, 2) positions, dummies included
    ped_real: np.ndarray
    companion: np.ndarray  # world position (synthesized when NonSCN)
    obstacles: np.ndarray


def build_snapshot(replay: SceneReplay, step: int, pose: Pose2D, cmd: VelocityCommand, sim: SimConfig) -> Snapshot:
    sc = replay.scenario
    d_g, phi_g = relative_polar(pose, sc.goal)
    peds = replay.pedestrians(step)
    p_ped, nearest, real = compute_p_ped(pose, peds, replay.env.occupancy, N_PED)
    com = replay.companion(step)
    if com is None:
        p_com, _ = synthesize_companion(phi_g, sim.synth_com_distance)
        ang = pose.heading + phi_g
        com = np.array([pose.x + p_com[0] * math.cos(ang), pose.y + p_com[0] * math.sin(ang)])
    else:
        p_com = np.array(relative_polar(pose, com))
    obstacles = obstacle_points_near(replay.env.occupancy, pose, sim.sensor.obs_radius)
    p_obs = compute_p_obs(pose, obstacles, sim.sensor.eps_rho, sim.sensor.obs_radius)
    state = WorldState(d_g, phi_g, cmd.v_t, cmd.v_r, p_ped, p_com, p_obs)
    return Snapshot(state, pose, peds, nearest, real, com, obstacles)


def observe(snap: Snapshot, mode: Mode, sim: SimConfig, rng) -> Observation:
    s = snap.state
    sensor = sim.sensor
    p_ped = observe_peds(s.p_ped, sensor, rng)
    if mode is Mode.SCN:
        p_com = observe_com(s.p_com, sensor, rng)
    else:
        p_com = s.p_com.copy()
    p_obs = observe_obs(snap.pose, snap.obstacles, sensor, rng)
    return Observation(s.d_g, s.phi_g, s.v_t, s.v_r, p_ped, p_com, p_obs)


def terminal_cause(snap: Snapshot, mode: Mode, sim: SimConfig) -> TerminationCause:
    s = snap.state
    ped_d = s.p_ped[snap.ped_real, 0]
    return check_termination(s.d_g, ped_d, s.p_com[0], s.p_obs, sim.thresholds, mode is Mode.SCN)


@dataclass
class StepContext:
    """What a controller may consult when choosing an action."""

    step: int
    observation: Observation
    snapshot: Snapshot
    scenario: Scenario
    env: EnvironmentSpec
    sim: SimConfig
    rng: np.random.Generator


class Controller(Protocol):
    def reset(self) -> None: ...

    def act(self, ctx: StepContext) -> tuple[np.ndarray, float]: ...


class GaussianPolicyAgent:
    """Samples actions from the recurrent Gaussian policy."""

    def __init__(self, net: PolicyNet, theta: np.ndarray, sigma: float, sim: SimConfig = SimConfig()):
        if not sigma > 0:
            raise ValueError("sigma must be positive")
        self.net = net
        self.theta = np.array(theta, dtype=float)
        self.sigma = float(sigma)
        self.sim = sim
        self._params = net.layout.unflatten(self.theta)
        self._state = net.initial_state()

    def __getstate__(self):
        d = self.__dict__.copy()
        d.pop("_params")
        return d

    def __setstate__(self, d):
        self.__dict__.update(d)
        self._params = self.net.layout.unflatten(self.theta)

    def reset(self) -> None:
        self._state = self.net.initial_state()

    def act(self, ctx: StepContext):
        x = scale_vector(ctx.observation.vector(), self.sim.sensor, self.sim.limits, self.sim.goal_scale)
        mu, self._state = self.net.step(self._params, x[None, :], self._state)
        mu = mu[0]
        a = mu + self.sigma * ctx.rng.standard_normal(2)
        return a, float(log_prob(mu, self.sigma, a))


class ConstantController:
    def __init__(self, v_t: float = 0.0, v_r: float = 0.0):
        self.action = np.array([v_t, v_r], dtype=float)

    def reset(self) -> None:
        pass

    def act(self, ctx: StepContext):
        return self.action.copy(), 0.0


@dataclass
class Transition:
    observation: np.ndarray
    state: np.ndarray
    action: np.ndarray
    reward: float
    terminal: bool
    episode_start: bool


@dataclass
class Episode:
    episode_id: int
    scenario: Scenario
    observations: np.ndarray  # (T, STATE_DIM)
    states: np.ndarray  # (T + 1, STATE_DIM); last row is the state after the final step
    actions: np.ndarray  # (T, 2) as sampled
    executed: np.ndarray  # (T, 2) after clamping
    logp: np.ndarray  # (T,)
    rewards: np.ndarray  # (T,)
    cause: TerminationCause
    truncated: bool
    poses: np.ndarray  # (T + 1, 3)
    companion: np.ndarray  # (T + 1, 2)
    peds: np.ndarray  # (T + 1, N_PED, 2), NaN for dummies

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def transitions(self) -> list[Transition]:
        T = len(self)
        return [
            Transition(self.observations[i], self.states[i], self.actions[i], float(self.rewards[i]),
                       i == T - 1 and self.cause.terminal, i == 0)
            for i in range(T)
        ]

    def discounted_return(self, gamma: float) -> float:
        return float(np.sum(self.rewards * gamma ** np.arange(len(self))))


@dataclass
class EpisodeBatch:
    episodes: list[Episode] = field(default_factory=list)

    @property
    def total_steps(self) -> int:
        return sum(len(e) for e in self.episodes)

    def __len__(self) -> int:
        return len(self.episodes)

    def __iter__(self):
        return iter(self.episodes)


def run_episode(
    env: EnvironmentSpec,
    scenario: Scenario,
    controller: Controller,
    sim: SimConfig,
    rng,
    episode_id: int = 0,
) -> Episode:
    if sim.max_steps < 1:
        raise ValueError("max_steps must be at least 1")
    replay = SceneReplay(env, scenario)
    limits = sim.limits
    controller.reset()
    cmd = VelocityCommand(0.0, 0.0)
    pose = Pose2D(scenario.start[0], scenario.start[1], scenario.heading)
    snap = build_snapshot(replay, 0, pose, cmd, sim)
    obs, states, acts, execd, logps, rews = [], [snap.state.vector()], [], [], [], []
    poses, coms, peds = [], [], []

    def record(s: Snapshot):
        poses.append((s.pose.x, s.pose.y, s.pose.heading))
        coms.append(s.companion)
        pp = s.ped_nearest.copy()
        pp[~s.ped_real] = np.nan
        peds.append(pp)

    record(snap)
    cause = TerminationCause.NONE
    for i in range(sim.max_steps):
        o = observe(snap, scenario.mode, sim, rng)
        ctx = StepContext(i, o, snap, scenario, env, sim, rng)
        a, lp = controller.act(ctx)
        a = np.asarray(a, dtype=float)
        cmd = VelocityCommand(float(a[0]), float(a[1])).clamped(limits.v_t_max, limits.v_r_max)
        pose = step_pose(pose, cmd, limits.dt)
        snap = build_snapshot(replay, i + 1, pose, cmd, sim)
        cause = terminal_cause(snap, scenario.mode, sim)
        obs.append(o.vector())
        acts.append(a)
        execd.append((cmd.v_t, cmd.v_r))
        logps.append(lp)
        rews.append(reward(cause, cmd.v_r))
        states.append(snap.state.vector())
        record(snap)
        if cause.terminal:
            break
    return Episode(
        episode_id, scenario,
        np.array(obs).reshape(-1, STATE_DIM), np.array(states), np.array(acts).reshape(-1, 2),
        np.array(execd).reshape(-1, 2), np.array(logps), np.array(rews), cause, not cause.terminal,
        np.array(poses), np.array(coms), np.array(peds),
    )


def episode_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def _run_indexed(environments, controller, sim, seed, index, mode):
    rng = episode_rng(seed, index)
    scenario = sample_scenario(environments, rng, mode, sim)
    return run_episode(environments[scenario.env_index], scenario, controller, sim, rng, index)


_WORKER: dict = {}


def _worker_init(environments, controller, sim, mode):
    _WORKER.update(environments=environments, controller=controller, sim=sim, mode=mode)


def _worker_run(seed, index):
    w = _WORKER
    return _run_indexed(w["environments"], w["controller"], w["sim"], seed, index, w["mode"])


def collect_batch(
    environments: Sequence[EnvironmentSpec],
    controller: Controller,
    batch_steps: int,
    seed: int,
    sim: SimConfig = SimConfig(),
    workers: int = 1,
    mode: Optional[Mode] = None,
) -> EpisodeBatch:
    """Run whole episodes until at least ``batch_steps`` transitions exist.

    Episode ``n`` always draws from the stream seeded by ``(seed, n)``, so the
    batch does not depend on the worker count.
    """
    if batch_steps < 1:
        raise ValueError("batch_steps must be at least 1")
    batch = EpisodeBatch()
    if workers <= 1:
        n = 0
        while batch.total_steps < batch_steps:
            batch.episodes.append(_run_indexed(environments, controller, sim, seed, n, mode))
            n += 1
        return batch
    with ProcessPoolExecutor(workers, initializer=_worker_init, initargs=(environments, controller, sim, mode)) as ex:
        n = 0
        while batch.total_steps < batch_steps:
            futures = [ex.submit(_worker_run, seed, n + k) for k in range(workers)]
            n += workers
            for fut in futures:
                ep = fut.result()
                if batch.total_steps < batch_steps:
                    batch.episodes.append(ep)
    return batch


# -- export ------------------------------------------------------------------------

EXPORT_COLUMNS = (
    ["episode_id", "t", "x", "y", "heading", "v_T", "v_R", "reward", "cause", "com_x", "com_y"]
    + [f"ped{j + 1}_{ax}" for j in range(N_PED) for ax in "xy"]
)


def episode_rows(ep: Episode, dt: float):
    """Row 0 is the initial state; row ``i + 1`` follows transition ``i``."""
    T = len(ep)
    for i in range(T + 1):
        if i == 0:
            v, r, cause = (0.0, 0.0), 0.0, TerminationCause.NONE.value
        else:
            v, r = ep.executed[i - 1], ep.rewards[i - 1]
            cause = ep.cause.value if i == T else TerminationCause.NONE.value
        x, y, h = ep.poses[i]
        yield [ep.episode_id, round(i * dt, 10), x, y, h, v[0], v[1], r, cause,
               ep.companion[i][0], ep.companion[i][1], *ep.peds[i].ravel()]


def format_episodes(episodes, dt: float) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EXPORT_COLUMNS)
    for ep in episodes:
        for row in episode_rows(ep, dt):
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def read_episode_export(path) -> dict[int, dict[str, np.ndarray]]:
    """Parse an export file into per-episode column arrays."""
    out: dict[int, dict[str, list]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(EXPORT_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            ep = out.setdefault(int(row["episode_id"]), {c: [] for c in EXPORT_COLUMNS if c != "episode_id"})
            for c in ep:
                ep[c].append(row[c] if c == "cause" else float(row[c]))
    return {k: {c: np.array(v) for c, v in cols.items()} for k, cols in out.items()}
