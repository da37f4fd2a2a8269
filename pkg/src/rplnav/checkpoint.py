"""Checkpoint container.

Layout: an 8-byte magic tag, a little-endian uint64 header length, a UTF-8
JSON header, then every tensor's values as little-endian float64 in the order
the header lists them. The header records the format version, iteration
counter, sigma schedule, network shapes, run configuration and a manifest of
``(name, shape, offset)`` entries.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .nets import PolicyNet, SigmaSchedule, ValueNet
from .scene_io import atomic_write_bytes

MAGIC = b"RPLCKPT\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    policy: PolicyNet
    theta: np.ndarray
    value: ValueNet
    zeta: np.ndarray
    iteration: int
    schedule: SigmaSchedule
    config: dict = field(default_factory=dict)

    @property
    def sigma(self) -> float:
        return self.schedule(self.iteration)


def _policy_shape(net: PolicyNet) -> dict:
    return {"in_dim": net.in_dim, "hidden": list(net.hidden), "lstm": net.lstm, "out_dim": net.out_dim}


def _value_shape(net: ValueNet) -> dict:
    return {"in_dim": net.in_dim, "hidden": list(net.hidden), "scale": net.scale}


def encode(ck: Checkpoint) -> bytes:
    tensors, manifest, offset = [], [], 0
    for prefix, net, flat in (("policy", ck.policy, ck.theta), ("value", ck.value, ck.zeta)):
        if flat.shape != (net.size,):
            raise CheckpointError(f"{prefix} parameters have {flat.size} entries, network expects {net.size}")
        for name, arr in net.layout.unflatten(flat).items():
            manifest.append({"name": f"{prefix}/{name}", "shape": list(arr.shape), "offset": offset})
            tensors.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
            offset += arr.size * 8
    header = {
        "version": VERSION,
        "iteration": int(ck.iteration),
        "sigma_schedule": asdict(ck.schedule),
        "policy": _policy_shape(ck.policy),
        "value": _value_shape(ck.value),
        "config": ck.config,
        "tensors": manifest,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(tensors)


def save_checkpoint(path, ck: Checkpoint) -> None:
    atomic_write_bytes(path, encode(ck))


def read_header(data: bytes) -> tuple[dict, int]:
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    start = len(MAGIC) + 8
    if len(data) < start:
        raise CheckpointError("truncated checkpoint header")
    (hlen,) = struct.unpack("<Q", data[len(MAGIC) : start])
    try:
        header = json.loads(data[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    if header.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')!r}")
    return header, start + hlen


def decode(data: bytes) -> Checkpoint:
    header, body = read_header(data)
    try:
        pshape, vshape = header["policy"], header["value"]
        policy = PolicyNet(pshape["in_dim"], tuple(pshape["hidden"]), pshape["lstm"], pshape["out_dim"])
        value = ValueNet(vshape["in_dim"], tuple(vshape["hidden"]), vshape["scale"])
        schedule = SigmaSchedule(**header["sigma_schedule"])
        entries = {e["name"]: e for e in header["tensors"]}
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"incomplete checkpoint header: {exc}") from None
    flats = []
    for prefix, net in (("policy", policy), ("value", value)):
        params = {}
        for name, shape in net.layout.shapes.items():
            e = entries.pop(f"{prefix}/{name}", None)
            if e is None:
                raise CheckpointError(f"checkpoint lacks tensor {prefix}/{name}")
            if tuple(e["shape"]) != tuple(shape):
                raise CheckpointError(f"tensor {prefix}/{name} has shape {tuple(e['shape'])}, expected {tuple(shape)}")
            n = int(np.prod(shape))
            lo = body + e["offset"]
            if lo + 8 * n > len(data):
                raise CheckpointError(f"tensor {prefix}/{name} runs past the end of the file")
            params[name] = np.frombuffer(data, dtype="<f8", count=n, offset=lo).reshape(shape).astype(float)
        flats.append(net.layout.flatten(params))
    if entries:
        raise CheckpointError(f"unexpected tensors {sorted(entries)}")
    for flat, what in zip(flats, ("policy", "value")):
        if not np.all(np.isfinite(flat)):
            raise CheckpointError(f"{what} parameters contain non-finite values")
    return Checkpoint(policy, flats[0], value, flats[1], int(header["iteration"]), schedule, header.get("config", {}))


def load_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes())


def describe(path) -> str:
    """Human-readable summary of a checkpoint's header and tensors."""
    data = Path(path).read_bytes()
    header, body = read_header(data)
    ck = decode(data)
    lines = [
        f"version: {header['version']}",
        f"iteration: {ck.iteration}",
        f"sigma: {ck.sigma!r} (schedule {asdict(ck.schedule)})",
        f"policy: {header['policy']}",
        f"value: {header['value']}",
    ]
    for key in sorted(ck.config):
        lines.append(f"config.{key}: {ck.config[key]}")
    for e in header["tensors"]:
        n = int(np.prod(e["shape"]))
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=body + e["offset"])
        lines.append(f"tensor {e['name']} {tuple(e['shape'])} norm={float(np.linalg.norm(arr)):.6g}")
    return "\n".join(lines)
