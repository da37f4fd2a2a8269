import numpy as np
import pytest

from rplnav.episode import ConstantController, Mode, SimConfig, format_episodes, read_episode_export
from rplnav.evaluation import (
    NON_SCN_COLUMNS,
    SCN_COLUMNS,
    distance_metrics,
    max_companion_distance,
    min_pedestrian_distance,
    rate_report,
    run_trials,
)
from rplnav.rvo import RvoController
from rplnav.scenes import goal_only_scene

NAN = float("nan")


def export(xy, com, peds):
    """Column dict in the shape produced by the episode export reader."""
    xy = np.asarray(xy, float)
    com = np.asarray(com, float)
    peds = np.asarray(peds, float)
    cols = {"x": xy[:, 0], "y": xy[:, 1], "com_x": com[:, 0], "com_y": com[:, 1]}
    for j in range(3):
        cols[f"ped{j + 1}_x"] = peds[:, j, 0]
        cols[f"ped{j + 1}_y"] = peds[:, j, 1]
    return cols


def straight(n=5):
    return np.column_stack((np.linspace(0, 1, n), np.zeros(n)))


class TestDistanceMetrics:
    def test_single_episode_closest_approach(self):
        xy = straight()
        peds = np.full((5, 3, 2), NAN)
        peds[:, 0] = xy + [0.0, 0.35]
        peds[2, 1] = xy[2] + [0.0, 2.0]
        d_ped, _, n = distance_metrics({0: export(xy, xy + [1.0, 0.0], peds)})
        assert d_ped == pytest.approx(0.35) and n == 1

    def test_constant_companion_distance(self):
        xy = straight()
        _, d_com, _ = distance_metrics({0: export(xy, xy + [0.6, 0.8], np.full((5, 3, 2), NAN))})
        assert d_com == pytest.approx(1.0)

    def test_mean_over_episodes(self):
        xy = straight()
        eps = {}
        for k, gap in enumerate((0.3, 0.5)):
            peds = np.full((5, 3, 2), NAN)
            peds[:, 2] = xy + [0.0, -gap]
            eps[k] = export(xy, xy, peds)
        assert distance_metrics(eps)[0] == pytest.approx(0.4)

    def test_episodes_without_pedestrians_are_skipped(self):
        xy = straight()
        assert np.isnan(min_pedestrian_distance(xy[:, 0], xy[:, 1], np.full((5, 3, 2), NAN)))
        assert max_companion_distance(xy[:, 0], xy[:, 1], xy[:, 0], xy[:, 1] + 2.0) == pytest.approx(2.0)

    def test_reads_real_exports(self, open_scene, tmp_path):
        sim = SimConfig(max_steps=30)
        batch = run_trials([open_scene], ConstantController(0.3, 0.0), 3, 0, sim, Mode.SCN)
        path = tmp_path / "eps.csv"
        path.write_text(format_episodes(batch.episodes, sim.limits.dt))
        d_ped, d_com, n = distance_metrics(read_episode_export(path))
        assert d_com > 0 and n <= 3


class TestRates:
    @pytest.mark.parametrize("mode, columns", [(Mode.SCN, SCN_COLUMNS), (Mode.NON_SCN, NON_SCN_COLUMNS)])
    def test_rates_sum_to_100(self, open_scene, mode, columns):
        sim = SimConfig(max_steps=40)
        batch = run_trials([open_scene], ConstantController(0.7, 0.3), 12, 5, sim, mode)
        rep = rate_report(batch.episodes, mode)
        assert rep.columns == columns
        assert sum(rep.rates.values()) == pytest.approx(100.0)
        assert sum(float(v) for v in rep.row().split(",")[1:]) == pytest.approx(100.0, abs=0.1 * len(columns))

    def test_one_row_per_report(self, open_scene):
        batch = run_trials([open_scene], ConstantController(0.0, 0.0), 3, 0, SimConfig(max_steps=5), Mode.SCN)
        rep = rate_report(batch.episodes, Mode.SCN)
        assert rep.header() == "trials,RG,LC,HC,HP,HO,TO"
        assert "\n" not in rep.row() and rep.row().startswith("3,")

    def test_trial_count_and_reproducibility(self, open_scene):
        sim = SimConfig(max_steps=20)
        a = run_trials([open_scene], ConstantController(0.5, 0.1), 4, 9, sim)
        b = run_trials([open_scene], ConstantController(0.5, 0.1), 4, 9, sim)
        assert len(a.episodes) == 4
        for ea, eb in zip(a.episodes, b.episodes):
            np.testing.assert_array_equal(ea.poses, eb.poses)

    def test_rejects_zero_trials(self, open_scene):
        with pytest.raises(ValueError):
            run_trials([open_scene], ConstantController(0, 0), 0, 0)

    def test_trivially_reachable_goals(self):
        env = goal_only_scene(seed=0, length=(1.5, 3.0))
        sim = SimConfig(max_steps=200, scn_prob=0.0)
        batch = run_trials([env], RvoController(), 20, 0, sim, Mode.NON_SCN)
        assert rate_report(batch.episodes, Mode.NON_SCN).rates["RG"] == 100.0
