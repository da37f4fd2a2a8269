import math
from collections import Counter

import numpy as np
import pytest

from rplnav.episode import (
    ConfigurationError,
    ConstantController,
    GaussianPolicyAgent,
    Mode,
    SceneReplay,
    SimConfig,
    collect_batch,
    companion_start_index,
    episode_rng,
    format_episodes,
    read_episode_export,
    run_episode,
    sample_scenario,
    synthesize_companion,
)
from rplnav.nets import PolicyNet
from rplnav.world import EnvironmentSpec, OccupancyGrid, SensorModel, TerminationCause, Trajectory, reward

from conftest import line


def _drive(v_t=0.7, v_r=0.0):
    return ConstantController(v_t, v_r)


def test_scn_scenario_sampling(open_scene):
    sc = sample_scenario([open_scene], np.random.default_rng(0), Mode.SCN)
    assert sc.traj_id == 1 and sc.mode is Mode.SCN
    traj = open_scene.trajectories[1]
    assert math.dist(traj.positions[sc.companion_start], traj.positions[0]) >= 0.6
    assert math.dist(traj.positions[sc.companion_start - 1], traj.positions[0]) < 0.6
    assert sc.companion_start < len(traj.positions) - 1
    assert sc.pedestrian_ids == (2,)
    assert sc.heading == pytest.approx(0.0)


def test_non_scn_has_no_companion_trajectory(open_scene):
    sc = sample_scenario([open_scene], np.random.default_rng(0), Mode.NON_SCN)
    assert sc.companion_start is None
    assert SceneReplay(open_scene, sc).companion(3) is None


def test_environment_choice_is_uniform(open_scene):
    other = EnvironmentSpec("b", dict(open_scene.trajectories), open_scene.occupancy, [1, 2])
    rng = np.random.default_rng(1)
    counts = Counter(sample_scenario([open_scene, other], rng).env_index for _ in range(10_000))
    assert abs(counts[0] / 10_000 - 0.5) < 0.02
    modes = Counter(sample_scenario([open_scene], rng).mode for _ in range(4000))
    assert abs(modes[Mode.SCN] / 4000 - 0.5) < 0.03


def test_no_candidates_is_an_error(open_scene):
    env = EnvironmentSpec("x", open_scene.trajectories, open_scene.occupancy, [])
    with pytest.raises(ConfigurationError):
        sample_scenario([env], np.random.default_rng(0))


def test_companion_start_index():
    pts = np.array([[0, 0], [0.3, 0], [0.6, 0], [0.9, 0]], dtype=float)
    assert companion_start_index(pts, 0.6) == 2
    assert companion_start_index(pts[:3], 0.6) is None


def test_synthesized_companion():
    true, seen = synthesize_companion(0.3)
    assert tuple(true) == (0.8, 0.3) and tuple(seen) == (0.8, 0.3)
    assert tuple(synthesize_companion(0.0)[0]) == (0.8, 0.0)


def test_start_near_goal_is_one_step_success():
    grid = OccupancyGrid.free(10, 10, 0.1)
    env = EnvironmentSpec("s", {1: line(1, 0, (5, 5), (5.5, 5), 6)}, grid, [1])
    sim = SimConfig()
    sc = sample_scenario([env], np.random.default_rng(0), Mode.NON_SCN, sim)
    ep = run_episode(env, sc, _drive(0.0), sim, np.random.default_rng(0))
    assert len(ep) == 1 and ep.cause is TerminationCause.GOAL_REACHED
    assert ep.rewards.tolist() == [10000.0]


def test_truncation_at_max_steps(open_scene):
    sim = SimConfig(max_steps=5)
    sc = sample_scenario([open_scene], np.random.default_rng(0), Mode.NON_SCN, sim)
    ep = run_episode(open_scene, sc, _drive(0.0), sim, np.random.default_rng(0))
    assert len(ep) == 5 and ep.cause is TerminationCause.NONE and ep.truncated
    assert ep.states.shape == (6, 21)


def test_replayed_positions_match_source(open_scene):
    sc = sample_scenario([open_scene], np.random.default_rng(0), Mode.SCN)
    replay = SceneReplay(open_scene, sc)
    ped = open_scene.trajectories[2]
    assert replay.pedestrians(4).shape == (0, 2)  # not yet recorded
    for step in (5, 20, 65):
        np.testing.assert_array_equal(replay.pedestrians(step)[0], ped.positions[step - 5])
    np.testing.assert_array_equal(replay.pedestrians(500)[0], ped.positions[-1])  # frozen
    comp = open_scene.trajectories[1].positions
    np.testing.assert_array_equal(replay.companion(0), comp[sc.companion_start])
    np.testing.assert_array_equal(replay.companion(10_000), comp[-1])


def test_scn_episode_reaches_goal_when_driving_straight(open_scene):
    # The companion walks 0.1 m/frame, faster than the robot: the robot gets lost.
    sim = SimConfig()
    sc = sample_scenario([open_scene], np.random.default_rng(0), Mode.SCN, sim)
    ep = run_episode(open_scene, sc, _drive(), sim, np.random.default_rng(0))
    assert ep.cause is TerminationCause.STRAY
    assert ep.rewards[-1] == -10000


def test_rewards_follow_cause_and_turning(open_scene):
    sim = SimConfig(max_steps=60)
    sc = sample_scenario([open_scene], np.random.default_rng(0), Mode.NON_SCN, sim)
    ep = run_episode(open_scene, sc, _drive(0.7, 0.2), sim, np.random.default_rng(0))
    assert ep.truncated and len(ep) == 60
    np.testing.assert_allclose(ep.rewards, -2.0)
    # the companion column carries the synthesized companion at 0.8 m
    d = np.hypot(*(ep.companion - ep.poses[:, :2]).T)
    np.testing.assert_allclose(d, 0.8)


def test_non_scn_goal_reached_straight(open_scene):
    sim = SimConfig()
    sc = sample_scenario([open_scene], np.random.default_rng(0), Mode.NON_SCN, sim)
    ep = run_episode(open_scene, sc, _drive(), sim, np.random.default_rng(0))
    assert ep.cause is TerminationCause.GOAL_REACHED
    # 10 m at 0.07 m/step, stop within 0.8 m
    assert len(ep) == math.ceil((10 - 0.8) / 0.07 - 1e-9)


def test_actions_are_clamped_but_recorded_raw(open_scene):
    sim = SimConfig(max_steps=3)
    sc = sample_scenario([open_scene], np.random.default_rng(0), Mode.NON_SCN, sim)
    ep = run_episode(open_scene, sc, _drive(5.0, -4.0), sim, np.random.default_rng(0))
    assert np.all(ep.actions == [5.0, -4.0])
    np.testing.assert_allclose(ep.executed, [[0.7, -math.pi / 3]] * 3)


def test_gaussian_agent_episode_is_reproducible(open_scene):
    net = PolicyNet(21, (8, 4), 4)
    theta = net.init_params(np.random.default_rng(0), out_gain=1.0)
    agent = GaussianPolicyAgent(net, theta, 0.3)
    sim = SimConfig(max_steps=50)
    a = collect_batch([open_scene], agent, 120, seed=7, sim=sim)
    b = collect_batch([open_scene], agent, 120, seed=7, sim=sim)
    assert [len(e) for e in a] == [len(e) for e in b]
    for ea, eb in zip(a, b):
        assert ea.actions.tobytes() == eb.actions.tobytes()
        assert ea.observations.tobytes() == eb.observations.tobytes()
    # log-probabilities are those of the unclamped samples
    ep = a.episodes[0]
    assert np.all(np.isfinite(ep.logp))


def test_batch_size_one_is_one_episode(open_scene):
    b = collect_batch([open_scene], _drive(), 1, seed=0, sim=SimConfig(max_steps=20))
    assert len(b) == 1


def test_batch_counts_whole_episodes(open_scene):
    sim = SimConfig(max_steps=10)
    b = collect_batch([open_scene], _drive(0.0), 35, seed=0, sim=sim)
    assert len(b) == 4 and b.total_steps == 40


def test_two_workers_match_single_worker(open_scene):
    net = PolicyNet(21, (8, 4), 4)
    agent = GaussianPolicyAgent(net, net.init_params(np.random.default_rng(1), out_gain=1.0), 0.4)
    sim = SimConfig(max_steps=30)
    one = collect_batch([open_scene], agent, 100, seed=3, sim=sim, workers=1)
    two = collect_batch([open_scene], agent, 100, seed=3, sim=sim, workers=2)
    key = lambda e: (e.episode_id, e.actions.tobytes(), e.rewards.tobytes())
    assert sorted(map(key, one)) == sorted(map(key, two))


def test_noise_free_observation_equals_state(open_scene):
    sim = SimConfig(sensor=SensorModel().noiseless(), max_steps=20)
    sc = sample_scenario([open_scene], np.random.default_rng(0), Mode.SCN, sim)
    ep = run_episode(open_scene, sc, _drive(0.3), sim, np.random.default_rng(0))
    # everything is within range and in front except masked dummies: compare goal, action, companion
    np.testing.assert_array_equal(ep.observations[:, :4], ep.states[:-1, :4])
    np.testing.assert_array_equal(ep.observations[:, 10:12], ep.states[:-1, 10:12])


def test_export_round_trip(tmp_path, open_scene):
    sim = SimConfig(max_steps=15)
    b = collect_batch([open_scene], _drive(0.5, 0.1), 20, seed=0, sim=sim)
    text = format_episodes(b.episodes, sim.limits.dt)
    path = tmp_path / "ep.csv"
    path.write_text(text)
    data = read_episode_export(path)
    assert sorted(data) == [e.episode_id for e in b]
    ep = b.episodes[0]
    cols = data[ep.episode_id]
    assert len(cols["t"]) == len(ep) + 1
    np.testing.assert_array_equal(cols["x"], ep.poses[:, 0])
    np.testing.assert_array_equal(cols["reward"][1:], ep.rewards)
    assert cols["cause"][-1] == ep.cause.value
    assert np.isnan(cols["ped3_x"]).all()  # only one pedestrian in the scene
