"""Command-line interface: ``rplnav <verb> [options]``."""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import scenes
from .checkpoint import Checkpoint, CheckpointError, describe, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, config_from_mapping, load_config
from .episode import (
    ConfigurationError,
    GaussianPolicyAgent,
    Mode,
    episode_rng,
    format_episodes,
    read_episode_export,
    run_episode,
    sample_scenario,
)
from .evaluation import distance_metrics, rate_report, run_trials
from .nets import NonFiniteError
from .rvo import RvoController
from .scene_io import (
    SceneFormatError,
    atomic_write_text,
    flag_wanderers,
    load_occupancy,
    load_scene,
    load_trajectories,
    save_scene,
    write_manifest,
)
from .trpo import METRIC_COLUMNS, TrainState, format_metrics_row, initial_state, train_loop
from .world import EnvironmentSpec

log = logging.getLogger("rplnav")

METRICS_FILE = "metrics.csv"
LOCK_FILE = ".rplnav.lock"


class CliError(Exception):
    pass


@contextlib.contextmanager
def directory_lock(directory: Path):
    """Refuse to run two commands against the same output directory."""
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / LOCK_FILE
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError(f"{directory} is locked by another run (remove {lock} if it is stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            lock.unlink()


# -- configuration ----------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value run configuration file")
    group = p.add_argument_group("configuration overrides")
    for f in fields(RunConfig):
        group.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", metavar="VALUE")


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {
        f.name: getattr(args, f"cfg_{f.name}") for f in fields(RunConfig) if getattr(args, f"cfg_{f.name}") is not None
    }
    return config_from_mapping(overrides, None, cfg) if overrides else cfg


def _runtime_seed(cfg: RunConfig) -> int:
    if cfg.deterministic:
        return cfg.seed
    # outside deterministic mode the seed comes from OS entropy (and is logged)
    seed = int(np.random.SeedSequence().generate_state(1)[0])
    log.info("non-deterministic run, using seed %d", seed)
    return seed


def _load_scenes(paths: Sequence[str], what: str) -> list[EnvironmentSpec]:
    if not paths:
        raise CliError(f"no {what} scenes configured")
    return [load_scene(p) for p in paths]


# -- verbs --------------------------------------------------------------------------

def cmd_ingest(args) -> int:
    trajs = load_trajectories(args.trajectories)
    grid = load_occupancy(args.map, args.meta)
    wanderers = flag_wanderers(trajs, args.wanderer_threshold)
    excluded = sorted((set(wanderers) | set(args.exclude or [])) - set(args.include or []))
    name = args.name or args.out.stem
    env = EnvironmentSpec(name, trajs, grid, sorted(set(trajs) - set(excluded)))  # validates map bounds
    write_manifest(args.out, env.name, args.trajectories, args.map, excluded)
    frames = np.array([len(t.positions) for t in trajs.values()])
    dur = frames * args.dt
    print(f"scene {name}: {len(trajs)} trajectories, {len(env.companion_candidates)} companion candidates")
    print(f"duration [s]: min {dur.min():.1f} mean {dur.mean():.1f} max {dur.max():.1f}")
    print(f"wanderers (net displacement < {args.wanderer_threshold} m): {', '.join(map(str, wanderers)) or 'none'}")
    print(f"manifest written to {args.out}")
    return 0


def cmd_make_scene(args) -> int:
    out = args.out
    if args.kind == "goal-only":
        envs = [scenes.goal_only_scene(seed=args.seed + k) for k in range(args.count)]
    else:
        envs = scenes.corridor_family(args.count, seed=args.seed)
    for env in envs:
        print(save_scene(env, out))
    return 0


def _write_checkpoint(out: Path, state: TrainState, cfg: RunConfig, net, vnet, name: Optional[str] = None) -> Path:
    ck = Checkpoint(net, state.theta, vnet, state.zeta, state.iteration, cfg.schedule(), cfg.as_dict())
    path = out / (name or f"ckpt_{state.iteration:06d}.rpl")
    save_checkpoint(path, ck)
    save_checkpoint(out / "latest.rpl", ck)
    return path


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    envs = _load_scenes(cfg.train_scenes, "training")
    out: Path = args.out
    iterations = cfg.iterations
    with directory_lock(out):
        metrics = out / METRICS_FILE
        seed = _runtime_seed(cfg)
        if args.resume:
            ck = load_checkpoint(args.resume)
            net, vnet = ck.policy, ck.value
            if net.size != cfg.policy_net().size or vnet.size != cfg.value_net().size:
                raise CliError("checkpoint network shapes do not match the configuration")
            state = TrainState(ck.theta, ck.zeta, ck.iteration)
            # keep the log consistent with the checkpoint being resumed
            lines = metrics.read_text().splitlines() if metrics.exists() else [",".join(METRIC_COLUMNS)]
            kept = [lines[0]] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) < ck.iteration]
            atomic_write_text(metrics, "\n".join(kept) + "\n")
        else:
            net, vnet = cfg.policy_net(), cfg.value_net()
            state = initial_state(net, vnet, seed)
            atomic_write_text(metrics, ",".join(METRIC_COLUMNS) + "\n")
            _write_checkpoint(out, state, cfg, net, vnet)
        remaining = max(0, iterations - state.iteration)

        fh = open(metrics, "a")

        def on_iteration(st: TrainState, record) -> None:
            fh.write(format_metrics_row(record.row) + "\n")
            fh.flush()
            if st.iteration % cfg.checkpoint_every == 0:
                _write_checkpoint(out, st, cfg, net, vnet)

        try:
            train_loop(envs, net, vnet, state, remaining, batch_steps=cfg.batch_steps, seed=seed,
                       trpo=cfg.trpo_config(), sim=cfg.sim_config(), schedule=cfg.schedule(),
                       workers=cfg.workers, on_iteration=on_iteration)
        except BaseException:
            _write_checkpoint(out, state, cfg, net, vnet, f"abort_{state.iteration:06d}.rpl")
            raise
        finally:
            fh.close()
        path = _write_checkpoint(out, state, cfg, net, vnet)
        print(f"trained to iteration {state.iteration}; checkpoint {path}")
    return 0


def _controller(args, cfg: RunConfig):
    if args.baseline == "rvo":
        return RvoController(cfg.rvo_config()), "rvo"
    if args.checkpoint is None:
        raise CliError("give --checkpoint or --baseline rvo")
    ck = load_checkpoint(args.checkpoint)
    sigma = cfg.evaluation_sigma()
    return GaussianPolicyAgent(ck.policy, ck.theta, sigma, cfg.sim_config()), "policy"


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    envs = _load_scenes(args.scenes or cfg.eval_scenes, "evaluation")
    controller, label = _controller(args, cfg)
    sim = cfg.sim_config()
    modes = {"scn": [Mode.SCN], "nonscn": [Mode.NON_SCN], "both": [Mode.SCN, Mode.NON_SCN]}[args.mode]
    lines = []
    for mode in modes:
        batch = run_trials(envs, controller, args.trials, _runtime_seed(cfg), sim, mode, cfg.workers)
        rep = rate_report(batch.episodes, mode)
        lines += [f"planner,mode,{rep.header()}", f"{label},{mode.value},{rep.row()}"]
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        atomic_write_text(args.out, text)
    return 0


def cmd_rollout(args) -> int:
    cfg = _resolve_config(args)
    env = load_scene(args.scene)
    controller, _ = _controller(args, cfg)
    sim = cfg.sim_config()
    mode = {"scn": Mode.SCN, "nonscn": Mode.NON_SCN, "any": None}[args.mode]
    seed = _runtime_seed(cfg)
    episodes = []
    for n in range(args.episodes):
        rng = episode_rng(seed, n)
        scenario = sample_scenario([env], rng, mode, sim)
        episodes.append(run_episode(env, scenario, controller, sim, rng, n))
    atomic_write_text(args.out, format_episodes(episodes, sim.limits.dt))
    for ep in episodes:
        print(f"episode {ep.episode_id}: {ep.scenario.mode.value} {len(ep)} steps, {ep.cause.value}")
    return 0


def cmd_metrics(args) -> int:
    exports = {}
    for path in args.files:
        for k, cols in read_episode_export(path).items():
            exports[(str(path), k)] = cols
    if not exports:
        raise CliError("no episodes found")
    d_ped, d_com, n_ped = distance_metrics(exports)
    print(f"episodes: {len(exports)}")
    print(f"D_ped: {d_ped:.4f} m (over {n_ped} episodes with pedestrians)")
    print(f"D_com: {d_com:.4f} m")
    return 0


def cmd_inspect(args) -> int:
    print(describe(args.checkpoint))
    return 0


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rplnav", description="Role-playing navigation training and evaluation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a trajectory file and map, write a scene manifest")
    p.add_argument("--trajectories", type=Path, required=True)
    p.add_argument("--map", type=Path, required=True)
    p.add_argument("--meta", type=Path, help="map sidecar (default: map path with .meta suffix)")
    p.add_argument("--out", type=Path, required=True, help="manifest to write")
    p.add_argument("--name")
    p.add_argument("--wanderer-threshold", type=float, default=1.0)
    p.add_argument("--exclude", type=int, nargs="*", help="extra ids to exclude as companions")
    p.add_argument("--include", type=int, nargs="*", help="ids to keep as companions even if flagged")
    p.add_argument("--dt", type=float, default=0.1, help="seconds per frame, for the duration report")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("make-scene", help="write synthetic scenes")
    p.add_argument("kind", choices=("goal-only", "corridor"))
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=1)
    p.set_defaults(func=cmd_make_scene)

    p = sub.add_parser("train", help="run PO-TRPO training")
    _add_config_flags(p)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    for verb, func, help_ in (("eval", cmd_eval, "terminal-rate report"), ("rollout", cmd_rollout, "export episodes")):
        p = sub.add_parser(verb, help=help_)
        _add_config_flags(p)
        src = p.add_mutually_exclusive_group(required=True)
        src.add_argument("--checkpoint", type=Path)
        src.add_argument("--baseline", choices=("rvo",))
        p.set_defaults(func=func)
    eval_p, roll_p = sub.choices["eval"], sub.choices["rollout"]
    eval_p.add_argument("--scenes", nargs="*", help="scene manifests (default: eval_scenes)")
    eval_p.add_argument("--trials", type=int, default=300)
    eval_p.add_argument("--mode", choices=("scn", "nonscn", "both"), default="both")
    eval_p.add_argument("--out", type=Path)
    roll_p.add_argument("--scene", type=Path, required=True)
    roll_p.add_argument("--episodes", type=int, default=1)
    roll_p.add_argument("--mode", choices=("scn", "nonscn", "any"), default="any")
    roll_p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("metrics", help="distance metrics from episode exports")
    p.add_argument("files", type=Path, nargs="+")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("inspect-checkpoint", help="print a checkpoint's header and tensors")
    p.add_argument("checkpoint", type=Path)
    p.set_defaults(func=cmd_inspect)
    return parser


EXPECTED_ERRORS = (CliError, ConfigError, ConfigurationError, SceneFormatError, CheckpointError,
                   NonFiniteError, OSError, ValueError)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except EXPECTED_ERRORS as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"rplnav: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
