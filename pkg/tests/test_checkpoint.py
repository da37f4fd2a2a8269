import json
import struct

import numpy as np
import pytest

from rplnav.checkpoint import MAGIC, Checkpoint, CheckpointError, decode, describe, encode, load_checkpoint, save_checkpoint
from rplnav.nets import PolicyNet, SigmaSchedule, ValueNet


@pytest.fixture
def ck():
    rng = np.random.default_rng(0)
    net, vnet = PolicyNet(hidden=(8, 4), lstm=4), ValueNet(hidden=(6,))
    return Checkpoint(net, net.init_params(rng) + rng.normal(size=net.size), vnet, vnet.init_params(rng),
                      17, SigmaSchedule(0.5, 0.05, 25), {"seed": "3"})


def test_round_trip_is_bit_exact(ck, tmp_path):
    path = tmp_path / "a.rpl"
    save_checkpoint(path, ck)
    back = load_checkpoint(path)
    assert back.theta.tobytes() == ck.theta.tobytes()
    assert back.zeta.tobytes() == ck.zeta.tobytes()
    assert back.iteration == 17 and back.schedule == ck.schedule and back.config == {"seed": "3"}
    assert back.policy.hidden == (8, 4) and back.value.hidden == (6,)
    assert back.sigma == ck.schedule(17)
    assert encode(back) == encode(ck)


def test_bad_magic(ck):
    with pytest.raises(CheckpointError, match="magic"):
        decode(b"NOTACKPT" + encode(ck)[8:])


def _rewrite_header(data: bytes, edit) -> bytes:
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + n])
    edit(header)
    h = json.dumps(header).encode()
    return MAGIC + struct.pack("<Q", len(h)) + h + data[16 + n :]


def test_shape_mismatch(ck):
    def edit(h):
        h["policy"]["hidden"] = [8, 5]

    with pytest.raises(CheckpointError, match="shape"):
        decode(_rewrite_header(encode(ck), edit))


def test_missing_and_extra_tensors(ck):
    with pytest.raises(CheckpointError, match="lacks"):
        decode(_rewrite_header(encode(ck), lambda h: h["tensors"].pop()))

    def extra(h):
        h["tensors"].append(dict(h["tensors"][0], name="policy/extra"))

    with pytest.raises(CheckpointError, match="unexpected"):
        decode(_rewrite_header(encode(ck), extra))


def test_truncated_body(ck):
    with pytest.raises(CheckpointError, match="past the end"):
        decode(encode(ck)[:-8])


def test_non_finite_rejected(ck):
    ck.theta[3] = np.nan
    with pytest.raises(CheckpointError, match="non-finite"):
        decode(encode(ck))


def test_wrong_parameter_count(ck):
    ck.theta = ck.theta[:-1]
    with pytest.raises(CheckpointError):
        encode(ck)


def test_describe(ck, tmp_path):
    path = tmp_path / "a.rpl"
    save_checkpoint(path, ck)
    text = describe(path)
    assert "iteration: 17" in text and "tensor policy/" in text and "config.seed: 3" in text
