import struct

import numpy as np
import pytest

from florg_sim.checkpoint import (
    MAGIC, Checkpoint, dumps, encode_payload, load_checkpoint, loads, payload_nbytes, save_checkpoint,
)
from florg_sim.errors import CheckpointError


@pytest.fixture
def checkpoint(rng):
    return Checkpoint(
        config={"scheme": "florg", "rank": 2, "eta": 5e-5},
        round_idx=7,
        matrices={"layer0.a": rng.standard_normal((2, 5)), "layer0.w0": rng.standard_normal((4, 5))},
    )


def test_save_and_load(tmp_path, checkpoint):
    path = tmp_path / "final.ckpt"
    size = save_checkpoint(path, checkpoint)
    loaded = load_checkpoint(path)

    assert size == path.stat().st_size
    assert loaded.config == checkpoint.config
    assert loaded.round_idx == 7
    assert list(loaded.matrices) == ["layer0.a", "layer0.w0"]
    for name, m in checkpoint.matrices.items():
        np.testing.assert_array_equal(loaded.matrices[name], m)


def test_layout_is_little_endian_fp64(checkpoint):
    blob = dumps(checkpoint)
    assert blob.startswith(MAGIC)
    version, _ = struct.unpack_from("<II", blob, len(MAGIC))
    assert version == 1
    tail = blob[-8:]
    assert struct.unpack("<d", tail)[0] == checkpoint.matrices["layer0.w0"][-1, -1]


def test_payload_sizes(rng):
    payload = {"a": rng.standard_normal((4, 32))}
    assert payload_nbytes(payload) == 8 * 4 * 32
    header = 2 + len("a") + 8
    assert len(encode_payload(payload)) == header + payload_nbytes(payload)


@pytest.mark.parametrize("mutate,match", [
    (lambda blob: b"NOTMAGIC" + blob[8:], "bad magic"),
    (lambda blob: blob[:8] + struct.pack("<I", 99) + blob[12:], "version 99"),
    (lambda blob: blob[:-3], "truncated"),
    (lambda blob: blob + b"\x00", "trailing"),
])
def test_corrupt_checkpoints_are_rejected(checkpoint, mutate, match):
    with pytest.raises(CheckpointError, match=match):
        loads(mutate(dumps(checkpoint)))


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.ckpt")
