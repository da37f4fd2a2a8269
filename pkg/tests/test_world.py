import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rplnav.geometry import Pose2D, relative_polar
from rplnav.world import (
    FAIL_REWARD,
    GOAL_REWARD,
    STATE_DIM,
    OccupancyGrid,
    SensorModel,
    TerminationCause,
    Thresholds,
    check_termination,
    compute_p_obs,
    compute_p_ped,
    obstacle_points_near,
    observe_com,
    observe_obs,
    observe_peds,
    reward,
)

SENSOR = SensorModel()
FALLBACK = 4.0


def test_state_dimension():
    assert STATE_DIM == 21


# -- obstacle points ---------------------------------------------------------

def test_free_grid_has_no_points():
    grid = OccupancyGrid.free(10, 10, 0.1)
    assert obstacle_points_near(grid, Pose2D(5, 5, 0), 4.0).shape == (0, 2)


def test_single_cell_at_boundary_is_included():
    cells = np.zeros((50, 50), dtype=bool)
    cells[10, 40] = True  # centre (4.0, 1.0) with origin (0, 0), res 0.1
    grid = OccupancyGrid(cells, 0.1)
    pose = Pose2D(1.0, 1.0, 0.0)
    assert obstacle_points_near(grid, pose, 3.0 + 1e-9).tolist() == [[pytest.approx(4.0), pytest.approx(1.0)]]
    assert obstacle_points_near(grid, pose, 3.0 - 1e-6).shape == (0, 2)


def _brute_points(grid, pose, radius):
    out = []
    rows, cols = grid.shape
    for i in range(rows):
        for j in range(cols):
            if grid.cells[i, j]:
                cx, cy = grid.origin[0] + j * grid.resolution, grid.origin[1] + i * grid.resolution
                if math.hypot(cx - pose.x, cy - pose.y) <= radius:
                    out.append((cx, cy))
    return sorted(out)


def test_wall_half_covered():
    cells = np.zeros((41, 41), dtype=bool)
    cells[:, 30] = True  # wall at x = 3.0
    grid = OccupancyGrid(cells, 0.1)
    pose = Pose2D(0.0, 2.0, 0.0)
    pts = obstacle_points_near(grid, pose, 3.6)
    expected = _brute_points(grid, pose, 3.6)
    assert sorted(map(tuple, pts.round(12))) == [tuple(np.round(p, 12)) for p in expected]
    assert 0 < len(pts) < 41


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_obstacle_points_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    cells = rng.random((25, 30)) < 0.15
    cells[0, 0] = False
    grid = OccupancyGrid(cells, 0.2, origin=(rng.uniform(-2, 2), rng.uniform(-2, 2)))
    pose = Pose2D(*rng.uniform(-1, 5, size=2), rng.uniform(-3, 3))
    radius = rng.uniform(0.3, 4.0)
    got = sorted(map(tuple, obstacle_points_near(grid, pose, radius)))
    want = _brute_points(grid, pose, radius)
    assert len(got) == len(want)
    np.testing.assert_allclose(np.array(got).reshape(-1, 2), np.array(want).reshape(-1, 2))


# -- obstacle summary ----------------------------------------------------------

def test_p_obs_empty_fallback():
    out = compute_p_obs(Pose2D(0, 0, 0), np.empty((0, 2)), 0.1, FALLBACK)
    f = FALLBACK
    np.testing.assert_array_equal(out, [f, f, math.pi / 2, f, -math.pi / 2, f, math.pi / 2, f, -math.pi / 2])


def test_p_obs_point_ahead():
    out = compute_p_obs(Pose2D(0, 0, 0), np.array([[1.0, 0.0]]), 0.1, FALLBACK)
    assert out[0] == 1.0
    np.testing.assert_array_equal(out[1:], compute_p_obs(Pose2D(0, 0, 0), np.empty((0, 2)), 0.1, FALLBACK)[1:])


def test_p_obs_two_left_points():
    pts = np.array([[0.0, 1.0], [-1.0, 1.7320508075688772]])  # 1 m at +90 deg, 2 m at +120 deg
    out = compute_p_obs(Pose2D(0, 0, 0), pts, 0.1, FALLBACK)
    assert out[1] == pytest.approx(1.0) and out[2] == pytest.approx(math.pi / 2)
    assert out[5] == pytest.approx(2.0) and out[6] == pytest.approx(2 * math.pi / 3)


def _brute_p_obs(pose, pts, eps, fallback):
    front, left, right = [], [], []
    for p in pts:
        d, phi = relative_polar(pose, p)
        if abs(phi) <= eps:
            front.append(d)
        if phi > eps:
            left.append((d, phi))
        if phi < -eps:
            right.append((d, phi))
    out = [min(front) if front else fallback]
    lmin = min(left) if left else (fallback, math.pi / 2)
    rmin = min(right) if right else (fallback, -math.pi / 2)
    lmax = max(left) if left else (fallback, math.pi / 2)
    rmax = max(right) if right else (fallback, -math.pi / 2)
    return np.array(out + list(lmin) + list(rmin) + list(lmax) + list(rmax))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_p_obs_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    cells = rng.random((40, 40)) < 0.1
    cells[0, 0] = False
    grid = OccupancyGrid(cells, 0.1)
    pose = Pose2D(*rng.uniform(0.5, 3.5, size=2), rng.uniform(-math.pi, math.pi))
    pts = obstacle_points_near(grid, pose, 2.0)
    got = compute_p_obs(pose, pts, 0.1, 2.0)
    want = _brute_p_obs(pose, pts, 0.1, 2.0)
    np.testing.assert_allclose(got[[0, 1, 3, 5, 7]], want[[0, 1, 3, 5, 7]], atol=1e-12)
    # angles may differ only between equidistant cells
    for slot in (2, 4, 6, 8):
        if got[slot - 1] != 2.0 or want[slot - 1] != 2.0:
            assert got[slot - 1] == pytest.approx(want[slot - 1])


# -- pedestrians ----------------------------------------------------------------

GRID = OccupancyGrid.free(20, 10, 0.1)


def test_p_ped_all_dummies():
    pose = Pose2D(1.0, 1.0, 0.0)
    pairs, pos, real = compute_p_ped(pose, np.empty((0, 2)), GRID)
    corner = GRID.farthest_corner((1.0, 1.0))
    assert not real.any()
    np.testing.assert_allclose(pos, [corner] * 3)
    np.testing.assert_allclose(pairs, [relative_polar(pose, corner)] * 3)


def test_p_ped_one_real():
    pairs, _, real = compute_p_ped(Pose2D(5, 5, 0), [[7.0, 5.0]], GRID)
    assert tuple(pairs[0]) == (2.0, 0.0)
    assert real.tolist() == [True, False, False]


def test_p_ped_nearest_three():
    rng = np.random.default_rng(3)
    pts = rng.uniform(0, 10, size=(5, 2))
    pose = Pose2D(5, 5, 0.4)
    pairs, pos, real = compute_p_ped(pose, pts, GRID)
    brute = sorted(relative_polar(pose, p)[0] for p in pts)[:3]
    np.testing.assert_allclose(pairs[:, 0], brute)
    assert real.all()


def test_observe_peds_noise_free_identity():
    s = SENSOR.noiseless()
    out = observe_peds(np.array([[2.0, 0.0], [1.0, 0.5], [3.0, -1.0]]), s, np.random.default_rng(0))
    np.testing.assert_array_equal(out, [[2.0, 0.0], [1.0, 0.5], [3.0, -1.0]])


def test_observe_peds_masks_outside_fov():
    out = observe_peds(np.array([[2.0, 3 * math.pi / 4], [SENSOR.ped_range + 1, 0.0], [1.0, 0.0]]), SENSOR.noiseless())
    assert tuple(out[0]) == (SENSOR.ped_range, math.pi)
    assert tuple(out[1]) == (SENSOR.ped_range, math.pi)
    assert tuple(out[2]) == (1.0, 0.0)


@given(st.floats(0.0, 20.0), st.floats(-math.pi, math.pi), st.floats(0.0, 20.0), st.floats(-math.pi, math.pi))
def test_masking_leaks_nothing(d1, p1, d2, p2):
    s = SENSOR.noiseless()
    outside = lambda d, p: not (s.ped_phi_min <= p <= s.ped_phi_max and d <= s.ped_range)
    if outside(d1, p1) and outside(d2, p2):
        a = observe_peds(np.array([[d1, p1]]), s)
        b = observe_peds(np.array([[d2, p2]]), s)
        np.testing.assert_array_equal(a, b)


def test_observe_peds_noise_statistics():
    rng = np.random.default_rng(1)
    draws = np.array([observe_peds(np.array([[2.0, 0.1]]), SENSOR, rng)[0, 0] for _ in range(20000)])
    assert draws.mean() == pytest.approx(2.0, abs=4 * 0.02 / math.sqrt(20000))
    assert draws.std() == pytest.approx(0.02, rel=0.05)


# -- obstacle / companion observation --------------------------------------------

def test_observe_obs_empty_uses_detector_range():
    s = SensorModel(obs_range=3.0)
    out = observe_obs(Pose2D(0, 0, 0), np.empty((0, 2)), s)
    assert out[0] == 3.0 and out[1] == 3.0 and out[2] == pytest.approx(math.pi / 2)


def test_observe_obs_excludes_point_behind():
    out = observe_obs(Pose2D(0, 0, 0), np.array([[-1.0, 0.0]]), SENSOR.noiseless())
    np.testing.assert_array_equal(out, compute_p_obs(Pose2D(0, 0, 0), np.empty((0, 2)), 0.1, SENSOR.obs_range))


def test_observe_obs_point_ahead():
    out = observe_obs(Pose2D(0, 0, 0), np.array([[1.0, 0.0]]), SENSOR.noiseless(), np.random.default_rng(0))
    assert out[0] == 1.0


def test_observe_com():
    assert tuple(observe_com((0.8, 0.3), SENSOR.noiseless(), np.random.default_rng(0))) == (0.8, 0.3)
    rng = np.random.default_rng(2)
    draws = np.array([observe_com((1.0, 0.2), SENSOR, rng) for _ in range(20000)])
    assert np.all(draws[:, 1] == 0.2)
    assert draws[:, 0].mean() == pytest.approx(1.0, abs=4 * 0.01 / math.sqrt(20000))
    assert draws[:, 0].std() == pytest.approx(0.01, rel=0.05)


class _Negative:
    def normal(self, loc, scale):
        return -1.0


def test_observe_com_clamps_at_zero():
    assert observe_com((0.01, 0.5), SENSOR, _Negative())[0] == 0.0


# -- termination and reward ---------------------------------------------------------

CLEAR_OBS = np.array([4.0, 4.0, 1.5, 4.0, -1.5, 4.0, 1.5, 4.0, -1.5])


def _term(d_g=5.0, peds=(3.0, 3.0, 3.0), d_com=1.0, p_obs=CLEAR_OBS, active=True):
    return check_termination(d_g, peds, d_com, p_obs, Thresholds(), active)


def test_termination_thresholds_fire_exactly():
    C = TerminationCause
    assert _term() is C.NONE
    assert _term(d_g=0.8) is C.GOAL_REACHED
    assert _term(d_g=0.79) is C.GOAL_REACHED
    assert _term(d_g=np.nextafter(0.8, 1)) is C.NONE
    assert _term(peds=(0.4, 3, 3)) is C.HIT_PEDESTRIAN
    assert _term(peds=(3, 0.39, 3)) is C.HIT_PEDESTRIAN
    assert _term(peds=(np.nextafter(0.4, 1), 3, 3)) is C.NONE
    assert _term(d_com=0.4) is C.HIT_COMPANION
    assert _term(d_com=np.nextafter(0.4, 1)) is C.NONE
    assert _term(d_com=2.0) is C.STRAY
    assert _term(d_com=np.nextafter(2.0, 0)) is C.NONE
    for slot in (0, 1, 3):
        p = CLEAR_OBS.copy()
        p[slot] = 0.2
        assert _term(p_obs=p) is C.HIT_OBSTACLE
        p[slot] = np.nextafter(0.2, 1)
        assert _term(p_obs=p) is C.NONE
    for slot in (5, 7):  # farthest-per-side entries never trigger collisions
        p = CLEAR_OBS.copy()
        p[slot] = 0.1
        assert _term(p_obs=p) is C.NONE


def test_termination_precedence():
    C = TerminationCause
    p = CLEAR_OBS.copy()
    p[0] = 0.1
    assert _term(d_g=0.5, peds=(0.3, 3, 3), d_com=0.3, p_obs=p) is C.HIT_PEDESTRIAN
    assert _term(d_g=0.5, d_com=0.3, p_obs=p) is C.HIT_COMPANION
    assert _term(d_g=0.5, d_com=3.0, p_obs=p) is C.HIT_OBSTACLE
    assert _term(d_g=0.5, d_com=3.0) is C.STRAY


def test_synthesized_companion_never_triggers():
    assert _term(d_com=0.1, active=False) is TerminationCause.NONE
    assert _term(d_com=5.0, active=False) is TerminationCause.NONE


@given(st.floats(0, 5), st.floats(0, 5), st.floats(0, 5), st.floats(0, 5), st.floats(0.0, 1.0))
def test_shrinking_collision_thresholds_never_creates_collisions(d_g, d_ped, d_com, d_obs, shrink):
    p = CLEAR_OBS.copy()
    p[0] = d_obs
    base = check_termination(d_g, [d_ped], d_com, p, Thresholds())
    small = Thresholds(ped=0.4 * shrink, com=0.4 * shrink, obs=0.2 * shrink)
    shrunk = check_termination(d_g, [d_ped], d_com, p, small)
    collisions = {TerminationCause.HIT_PEDESTRIAN, TerminationCause.HIT_COMPANION, TerminationCause.HIT_OBSTACLE}
    if base is TerminationCause.NONE:
        assert shrunk not in collisions


def test_reward_values():
    C = TerminationCause
    assert reward(C.GOAL_REACHED, 0.7) == GOAL_REWARD == 10000
    assert reward(C.STRAY, 0.0) == FAIL_REWARD == -10000
    for c in (C.HIT_PEDESTRIAN, C.HIT_COMPANION, C.HIT_OBSTACLE):
        assert reward(c, 0.3) == -10000
    assert reward(C.NONE, 0.2) == pytest.approx(-2.0)
    assert reward(C.NONE, -0.2) == pytest.approx(-2.0)


@given(st.floats(-math.pi / 3, math.pi / 3))
def test_step_reward_bounds(v_r):
    assert -10 * math.pi / 3 <= reward(TerminationCause.NONE, v_r) <= 0
