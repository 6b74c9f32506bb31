import numpy as np
import pytest
import torch

from cpcmil import ConfigurationError, PatchEncoder, get_profile
from cpcmil.checkpoint import (
    file_hash,
    load_checkpoint,
    load_into,
    save_checkpoint,
    state_checksum,
)
from cpcmil.seeding import seed_torch

TINY = get_profile("tiny")


def make_module(seed=0):
    seed_torch(seed)
    return PatchEncoder(TINY)


class TestCheckpointFormat:
    def test_round_trip_exact(self, tmp_path):
        module = make_module()
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, {"encoder": module}, TINY.name)
        profile_name, sections = load_checkpoint(path)
        assert profile_name == "tiny"
        assert set(sections) == {"encoder"}
        state = module.state_dict()
        assert list(sections["encoder"]) == list(state)
        for key, tensor in state.items():
            assert np.array_equal(sections["encoder"][key], tensor.numpy())

    def test_load_into_restores_weights(self, tmp_path):
        src = make_module(seed=1)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, {"encoder": src}, TINY.name)
        dst = make_module(seed=2)
        assert state_checksum(dst) != state_checksum(src)
        _, sections = load_checkpoint(path)
        load_into(dst, sections["encoder"])
        assert state_checksum(dst) == state_checksum(src)

    def test_write_is_deterministic(self, tmp_path):
        module = make_module()
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(a, {"encoder": module}, TINY.name)
        save_checkpoint(b, {"encoder": module}, TINY.name)
        assert file_hash(a) == file_hash(b)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 64)
        with pytest.raises(ConfigurationError):
            load_checkpoint(path)

    def test_truncation_rejected(self, tmp_path):
        module = make_module()
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, {"encoder": module}, TINY.name)
        clipped = tmp_path / "clipped.ckpt"
        clipped.write_bytes(path.read_bytes()[:-20])
        with pytest.raises(ConfigurationError):
            load_checkpoint(clipped)

    def test_trailing_bytes_rejected(self, tmp_path):
        module = make_module()
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, {"encoder": module}, TINY.name)
        padded = tmp_path / "padded.ckpt"
        padded.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(ConfigurationError):
            load_checkpoint(padded)

    def test_shape_mismatch_rejected(self, tmp_path):
        module = make_module()
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, {"encoder": module}, TINY.name)
        _, sections = load_checkpoint(path)
        desk_module = PatchEncoder(get_profile("desk"))
        with pytest.raises(ConfigurationError):
            load_into(desk_module, sections["encoder"])

    def test_checksum_tracks_values_not_identity(self):
        a, b = make_module(seed=3), make_module(seed=3)
        assert state_checksum(a) == state_checksum(b)
        with torch.no_grad():
            next(b.parameters()).add_(1.0)
        assert state_checksum(a) != state_checksum(b)
