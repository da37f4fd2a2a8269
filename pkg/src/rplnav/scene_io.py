"""Readers and writers for scene files.

* trajectories: ``frame_index,pedestrian_id,x_meters,y_meters`` per line
* occupancy map: PGM (P5 or P2), 0 = occupied, 255 = free, with a sidecar
  ``<map>.meta`` holding ``resolution``, ``origin_x``, ``origin_y``
* manifest: ``key = value`` lines naming the trajectory file, the map and the
  excluded (wanderer) pedestrian ids
"""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np

from .world import EnvironmentSpec, OccupancyGrid, Trajectory


class SceneFormatError(ValueError):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    """Write ``data`` to ``path`` through a temp file and an atomic rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def parse_key_values(text: str, source: str = "<text>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SceneFormatError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise SceneFormatError(f"{source}:{lineno}: empty key")
        if key in out:
            raise SceneFormatError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


# -- trajectories -----------------------------------------------------------

def parse_trajectories(text: str, source: str = "<trajectories>") -> dict[int, Trajectory]:
    """Parse trajectory records; gaps within an id are linearly interpolated."""
    samples: dict[int, list[tuple[int, float, float]]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 4:
            raise SceneFormatError(f"{source}:{lineno}: expected 4 comma-separated fields, got {len(parts)}")
        try:
            frame, pid = int(parts[0]), int(parts[1])
            x, y = float(parts[2]), float(parts[3])
        except ValueError as exc:
            raise SceneFormatError(f"{source}:{lineno}: {exc}") from None
        if not (np.isfinite(x) and np.isfinite(y)):
            raise SceneFormatError(f"{source}:{lineno}: non-finite position")
        track = samples.setdefault(pid, [])
        if track and frame <= track[-1][0]:
            raise SceneFormatError(
                f"{source}:{lineno}: frame {frame} for pedestrian {pid} does not increase "
                f"(previous frame {track[-1][0]})"
            )
        track.append((frame, x, y))

    trajectories = {}
    for pid, track in samples.items():
        if len(track) < 2:
            raise SceneFormatError(f"{source}: pedestrian {pid} has fewer than 2 samples")
        arr = np.array(track, dtype=float)
        frames = arr[:, 0].astype(int)
        full = np.arange(frames[0], frames[-1] + 1)
        pos = np.column_stack((np.interp(full, frames, arr[:, 1]), np.interp(full, frames, arr[:, 2])))
        # np.interp reproduces recorded samples exactly at their frames
        pos[frames - frames[0]] = arr[:, 1:]
        trajectories[pid] = Trajectory(pid, int(frames[0]), pos)
    return trajectories


def load_trajectories(path) -> dict[int, Trajectory]:
    path = Path(path)
    return parse_trajectories(path.read_text(), str(path))


def format_trajectories(trajectories: dict[int, Trajectory]) -> str:
    rows = []
    for pid in sorted(trajectories):
        t = trajectories[pid]
        for i, (x, y) in enumerate(t.positions):
            rows.append((t.start_frame + i, pid, float(x), float(y)))
    rows.sort(key=lambda r: (r[0], r[1]))
    return "".join(f"{f},{p},{x!r},{y!r}\n" for f, p, x, y in rows)


# -- occupancy maps ---------------------------------------------------------

def _pgm_tokens(data: bytes, count: int) -> tuple[list[int], int]:
    """Read ``count`` whitespace-separated header integers, skipping comments."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise SceneFormatError("truncated PGM header")
        tokens.append(data[start:pos])
    return tokens, pos


def read_pgm(path) -> tuple[np.ndarray, int]:
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in (b"P2", b"P5"):
        raise SceneFormatError(f"{path}: not a PGM file (magic {magic!r})")
    tokens, pos = _pgm_tokens(data[2:], 3)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise SceneFormatError(f"{path}: malformed PGM header") from None
    header_end = 2 + pos
    if magic == b"P5":
        body = data[header_end + 1 :]
        dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
        img = np.frombuffer(body, dtype=dtype, count=width * height)
    else:
        vals = data[header_end:].split()
        if len(vals) < width * height:
            raise SceneFormatError(f"{path}: PGM body has {len(vals)} values, expected {width * height}")
        img = np.array([int(v) for v in vals[: width * height]])
    return img.reshape(height, width).astype(int), maxval


def load_occupancy(map_path, meta_path=None) -> OccupancyGrid:
    """Load a PGM map. Image row 0 is the top (largest y) of the map."""
    map_path = Path(map_path)
    meta_path = Path(meta_path) if meta_path else map_path.with_suffix(".meta")
    meta = parse_key_values(meta_path.read_text(), str(meta_path))
    try:
        resolution = float(meta["resolution"])
        origin = (float(meta["origin_x"]), float(meta["origin_y"]))
    except KeyError as exc:
        raise SceneFormatError(f"{meta_path}: missing key {exc}") from None
    img, maxval = read_pgm(map_path)
    occupied = img < (maxval + 1) / 2
    return OccupancyGrid(occupied[::-1], resolution, origin)


def write_occupancy(grid: OccupancyGrid, map_path, binary: bool = True) -> None:
    map_path = Path(map_path)
    img = np.where(grid.cells[::-1], 0, 255).astype(np.uint8)
    h, w = img.shape
    if binary:
        data = f"P5\n{w} {h}\n255\n".encode() + img.tobytes()
    else:
        lines = "\n".join(" ".join(str(v) for v in row) for row in img)
        data = f"P2\n{w} {h}\n255\n{lines}\n".encode()
    atomic_write_bytes(map_path, data)
    meta = (
        f"resolution={float(grid.resolution)!r}\n"
        f"origin_x={float(grid.origin[0])!r}\norigin_y={float(grid.origin[1])!r}\n"
    )
    atomic_write_text(map_path.with_suffix(".meta"), meta)


# -- manifests --------------------------------------------------------------

def net_displacement(traj: Trajectory) -> float:
    return float(np.hypot(*(traj.positions[-1] - traj.positions[0])))


def flag_wanderers(trajectories: dict[int, Trajectory], threshold: float = 1.0) -> list[int]:
    """Ids whose net displacement is below ``threshold`` metres."""
    return sorted(pid for pid, t in trajectories.items() if net_displacement(t) < threshold)


def write_manifest(path, name: str, trajectories_file, map_file, excluded) -> None:
    path = Path(path)
    base = path.parent.resolve()

    def rel(p):
        p = Path(p).resolve()
        try:
            return p.relative_to(base).as_posix()
        except ValueError:
            return str(p)

    text = (
        f"name = {name}\n"
        f"trajectories = {rel(trajectories_file)}\n"
        f"map = {rel(map_file)}\n"
        f"excluded = {', '.join(str(i) for i in sorted(excluded))}\n"
    )
    atomic_write_text(path, text)


def load_scene(manifest_path) -> EnvironmentSpec:
    manifest_path = Path(manifest_path)
    kv = parse_key_values(manifest_path.read_text(), str(manifest_path))
    unknown = set(kv) - {"name", "trajectories", "map", "excluded"}
    if unknown:
        raise SceneFormatError(f"{manifest_path}: unknown keys {sorted(unknown)}")
    for key in ("trajectories", "map"):
        if key not in kv:
            raise SceneFormatError(f"{manifest_path}: missing key {key!r}")
    base = manifest_path.parent
    trajectories = load_trajectories(base / kv["trajectories"])
    grid = load_occupancy(base / kv["map"])
    excluded_raw = kv.get("excluded", "")
    try:
        excluded = {int(s) for s in excluded_raw.split(",") if s.strip()}
    except ValueError:
        raise SceneFormatError(f"{manifest_path}: malformed excluded id list") from None
    candidates = sorted(set(trajectories) - excluded)
    return EnvironmentSpec(kv.get("name", manifest_path.stem), trajectories, grid, candidates)


def save_scene(env: EnvironmentSpec, directory) -> Path:
    """Write ``env`` as trajectory file, map, sidecar and manifest; return the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    traj_path = directory / f"{env.name}.csv"
    map_path = directory / f"{env.name}.pgm"
    atomic_write_text(traj_path, format_trajectories(env.trajectories))
    write_occupancy(env.occupancy, map_path)
    manifest = directory / f"{env.name}.scene"
    excluded = sorted(set(env.trajectories) - set(env.companion_candidates))
    write_manifest(manifest, env.name, traj_path, map_path, excluded)
    return manifest
