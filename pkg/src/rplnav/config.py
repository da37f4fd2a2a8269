"""Run configuration: a flat ``key = value`` file with typed, bounded fields.

Lists are comma-separated. Scene paths are resolved relative to the config
file. Unknown keys are rejected so that typos never fall back to defaults.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .episode import SimConfig
from .nets import PolicyNet, SigmaSchedule, ValueNet
from .rvo import RvoConfig
from .scene_io import SceneFormatError, parse_key_values
from .trpo import TrpoConfig
from .world import N_PED, RobotLimits, SensorModel, Thresholds


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    train_scenes: tuple[str, ...] = ()
    eval_scenes: tuple[str, ...] = ()
    # networks
    policy_hidden: tuple[int, ...] = (256, 64)
    policy_lstm: int = 64
    value_hidden: tuple[int, ...] = (256, 64, 16)
    value_scale: float = 1e4
    # optimisation
    gamma: float = 0.995
    lam: float = 0.96
    kl_coeff: float = 0.01
    eps1: float = 0.1
    cg_iters: int = 10
    cg_damping: float = 0.1
    backtracks: int = 10
    value_passes: int = 5
    value_lr: float = 0.5
    normalize_advantages: bool = True
    sigma_start: float = 0.5
    sigma_end: float = 0.05
    sigma_decay_iters: int = 100
    eval_sigma: Optional[float] = None
    batch_steps: int = 50_000
    iterations: int = 1200
    checkpoint_every: int = 10
    # episodes
    max_steps: int = 1000
    scn_prob: float = 0.5
    companion_gap: float = 0.6
    synth_com_distance: float = 0.8
    goal_scale: float = 10.0
    n_ped: int = N_PED
    # sensing
    ped_phi_max: float = 2 * math.pi / 3
    ped_phi_min: float = -2 * math.pi / 3
    ped_range: float = 4.0
    obs_phi_max: float = 2 * math.pi / 3
    obs_phi_min: float = -2 * math.pi / 3
    obs_range: float = 4.0
    obs_radius: float = 4.0
    eps_rho: float = 0.1
    c_ped: float = 0.01
    c_com: float = 0.01
    c_obs: float = 0.01
    # robot
    v_t_max: float = 0.7
    v_r_max: float = math.pi / 3
    dt: float = 0.1
    # termination
    goal_threshold: float = 0.8
    ped_threshold: float = 0.4
    com_threshold: float = 0.4
    obs_threshold: float = 0.2
    stray_threshold: float = 2.0
    # baseline
    rvo_candidates: int = 200
    rvo_ttc_weight: float = 1.0
    rvo_heading_gain: float = 2.0
    # ingestion
    wanderer_threshold: float = 1.0
    # execution
    seed: int = 0
    workers: int = 1
    deterministic: bool = True

    def __post_init__(self):
        try:
            self.sim_config()
            self.trpo_config()
            self.rvo_config()
            self.schedule()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        positive = ("policy_lstm", "value_scale", "cg_iters", "value_passes", "value_lr", "sigma_start",
                    "sigma_end", "batch_steps", "checkpoint_every", "max_steps", "workers", "goal_scale")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        for name in ("backtracks", "iterations", "sigma_decay_iters", "cg_damping"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.eval_sigma is not None and not self.eval_sigma > 0:
            raise ConfigError("eval_sigma must be positive")
        if not self.policy_hidden or min(self.policy_hidden) < 1 or not self.value_hidden or min(self.value_hidden) < 1:
            raise ConfigError("hidden layer widths must be positive integers")
        if self.n_ped != N_PED:
            raise ConfigError(f"n_ped is fixed at {N_PED} by the state layout")
        if not 0 <= self.scn_prob <= 1:
            raise ConfigError("scn_prob must lie in [0, 1]")
        if self.wanderer_threshold < 0:
            raise ConfigError("wanderer_threshold must be non-negative")

    # -- builders ------------------------------------------------------------------

    def sim_config(self) -> SimConfig:
        sensor = SensorModel(
            ped_phi_max=self.ped_phi_max, ped_phi_min=self.ped_phi_min, ped_range=self.ped_range,
            obs_phi_max=self.obs_phi_max, obs_phi_min=self.obs_phi_min, obs_range=self.obs_range,
            c_ped=self.c_ped, c_com=self.c_com, c_obs=self.c_obs, eps_rho=self.eps_rho, obs_radius=self.obs_radius,
        )
        limits = RobotLimits(self.v_t_max, self.v_r_max, self.dt)
        if not (limits.v_t_max > 0 and limits.v_r_max > 0 and limits.dt > 0):
            raise ValueError("velocity limits and dt must be positive")
        thresholds = Thresholds(self.goal_threshold, self.ped_threshold, self.com_threshold,
                                self.obs_threshold, self.stray_threshold)
        for f in fields(thresholds):
            if not getattr(thresholds, f.name) > 0:
                raise ValueError(f"{f.name} threshold must be positive")
        return SimConfig(sensor, limits, thresholds, self.max_steps, self.scn_prob, self.companion_gap,
                         self.synth_com_distance, self.goal_scale)

    def trpo_config(self) -> TrpoConfig:
        return TrpoConfig(
            gamma=self.gamma, lam=self.lam, kl_coeff=self.kl_coeff, eps1=self.eps1, cg_iters=self.cg_iters,
            cg_damping=self.cg_damping, backtracks=self.backtracks, value_passes=self.value_passes,
            value_lr=self.value_lr, normalize_advantages=self.normalize_advantages,
        )

    def rvo_config(self) -> RvoConfig:
        return RvoConfig(n_candidates=self.rvo_candidates, ttc_weight=self.rvo_ttc_weight,
                         heading_gain=self.rvo_heading_gain)

    def schedule(self) -> SigmaSchedule:
        return SigmaSchedule(self.sigma_start, self.sigma_end, self.sigma_decay_iters)

    def policy_net(self) -> PolicyNet:
        return PolicyNet(hidden=self.policy_hidden, lstm=self.policy_lstm)

    def value_net(self) -> ValueNet:
        return ValueNet(hidden=self.value_hidden, scale=self.value_scale)

    def evaluation_sigma(self) -> float:
        return self.sigma_end if self.eval_sigma is None else self.eval_sigma

    # -- text form -------------------------------------------------------------------

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def as_dict(self) -> dict:
        return {f.name: _format(getattr(self, f.name)) for f in fields(self)}


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_float(text: str) -> float:
    value = float(text)
    if not math.isfinite(value):
        raise ValueError(f"expected a finite number, got {text!r}")
    return value


_PARSERS = {
    "int": int,
    "float": _parse_float,
    "bool": _parse_bool,
    "Optional[float]": lambda t: None if t.lower() == "none" else _parse_float(t),
    "tuple[int, ...]": lambda t: tuple(int(s) for s in t.split(",") if s.strip()),
    "tuple[str, ...]": lambda t: tuple(s.strip() for s in t.split(",") if s.strip()),
}


def config_from_mapping(values: dict[str, str], base: Optional[Path] = None, start: RunConfig = RunConfig()) -> RunConfig:
    """Override ``start`` with string ``values``; scene paths are made
    relative to ``base`` when given."""
    known = {f.name: f for f in fields(RunConfig)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    updates = {}
    for key, text in values.items():
        parser = _PARSERS[known[key].type]
        try:
            value = parser(text.strip())
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None
        if key in ("train_scenes", "eval_scenes") and base is not None:
            value = tuple(str((base / p)) if not Path(p).is_absolute() else p for p in value)
        updates[key] = value
    return dataclasses.replace(start, **updates)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        values = parse_key_values(path.read_text(), str(path))
    except SceneFormatError as exc:
        raise ConfigError(str(exc)) from None
    return config_from_mapping(values, path.parent)
