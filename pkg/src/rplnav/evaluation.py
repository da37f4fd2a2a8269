"""Trial batteries, terminal-rate tables and distance metrics."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .episode import Controller, Episode, EpisodeBatch, Mode, SimConfig, _run_indexed, _worker_init, _worker_run
from .world import EnvironmentSpec, TerminationCause

# Timeouts get their own column so that every row sums to 100.
SCN_COLUMNS = ("RG", "LC", "HC", "HP", "HO", "TO")
NON_SCN_COLUMNS = ("RG", "HP", "HO", "TO")


def run_trials(
    environments: Sequence[EnvironmentSpec],
    controller: Controller,
    trials: int,
    seed: int,
    sim: SimConfig = SimConfig(),
    mode: Optional[Mode] = None,
    workers: int = 1,
) -> EpisodeBatch:
    """Exactly ``trials`` episodes; trial ``n`` uses the stream ``(seed, n)``."""
    if trials < 1:
        raise ValueError("trials must be at least 1")
    if workers <= 1:
        return EpisodeBatch([_run_indexed(environments, controller, sim, seed, n, mode) for n in range(trials)])
    with ProcessPoolExecutor(workers, initializer=_worker_init, initargs=(environments, controller, sim, mode)) as ex:
        return EpisodeBatch(list(ex.map(_worker_run, [seed] * trials, range(trials))))


def cause_code(ep: Episode) -> str:
    return "TO" if ep.cause is TerminationCause.NONE else ep.cause.value


@dataclass
class RateReport:
    columns: tuple[str, ...]
    rates: dict[str, float]
    trials: int

    def header(self) -> str:
        return ",".join(("trials",) + self.columns)

    def row(self) -> str:
        return ",".join([str(self.trials)] + [f"{self.rates[c]:.1f}" for c in self.columns])


def rate_report(episodes: Sequence[Episode], mode: Mode) -> RateReport:
    """Percentages of each terminal condition.

    Companion conditions cannot fire without a companion, so the non-SCN
    table omits them.
    """
    columns = SCN_COLUMNS if mode is Mode.SCN else NON_SCN_COLUMNS
    n = len(episodes)
    if n == 0:
        raise ValueError("no episodes to report")
    counts = {c: 0 for c in columns}
    for ep in episodes:
        code = cause_code(ep)
        if code not in counts:
            raise ValueError(f"terminal condition {code} cannot occur in {mode.value} mode")
        counts[code] += 1
    return RateReport(columns, {c: 100.0 * counts[c] / n for c in columns}, n)


def min_pedestrian_distance(x, y, peds: np.ndarray) -> float:
    """Closest approach to any real pedestrian; ``peds`` is ``(T, N, 2)`` with NaN dummies."""
    d = np.hypot(peds[..., 0] - np.asarray(x)[:, None], peds[..., 1] - np.asarray(y)[:, None])
    return float(np.nanmin(d)) if np.isfinite(d).any() else float("nan")


def max_companion_distance(x, y, com_x, com_y) -> float:
    return float(np.max(np.hypot(np.asarray(com_x) - x, np.asarray(com_y) - y)))


def distance_metrics(exports: dict) -> tuple[float, float, int]:
    """Average per-episode minimum pedestrian distance and maximum companion
    distance over exported episodes. Episodes that never saw a pedestrian are
    skipped for the first average; the count of those used is returned."""
    d_ped, d_com = [], []
    for cols in exports.values():
        peds = np.stack([np.column_stack((cols[f"ped{j}_x"], cols[f"ped{j}_y"])) for j in (1, 2, 3)], axis=1)
        m = min_pedestrian_distance(cols["x"], cols["y"], peds)
        if np.isfinite(m):
            d_ped.append(m)
        d_com.append(max_companion_distance(cols["x"], cols["y"], cols["com_x"], cols["com_y"]))
    mean_ped = float(np.mean(d_ped)) if d_ped else float("nan")
    return mean_ped, float(np.mean(d_com)), len(d_ped)
