import pytest
import torch
from faker import Faker
from torch import nn

from arfm.checkpoint import Checkpoint
from arfm.checkpoint import CheckpointError
from arfm.checkpoint import CheckpointMismatch
from arfm.checkpoint import config_digest
from arfm.checkpoint import decode_checkpoint
from arfm.checkpoint import encode_checkpoint
from arfm.checkpoint import load_checkpoint
from arfm.checkpoint import save_checkpoint


fake = Faker()
config = {"width": 16, "layers": 2, "name": "tiny"}


def test_arrays_survive_bit_exact():
    arrays = {"a.weight": torch.randn(3, 4), "a.bias": torch.randn(4), "b": torch.randn(2, 2, 2)}
    header, decoded = decode_checkpoint(encode_checkpoint(arrays, config, {"shift_scale": 8.0}))
    assert list(decoded) == list(arrays)
    assert all(torch.equal(decoded[name], arrays[name]) for name in arrays)
    assert header["extras"]["shift_scale"] == 8.0
    assert header["config_digest"] == config_digest(config)


def test_digest_ignores_key_order():
    assert config_digest({"a": 1, "b": [1, 2]}) == config_digest({"b": [1, 2], "a": 1})


def test_config_mismatch_is_rejected(tmp_path):
    path = save_checkpoint(tmp_path / f"{fake.word()}.ckpt", {"w": torch.zeros(2)}, config)
    assert load_checkpoint(path, expected_config=config).id == config_digest(config)
    with pytest.raises(CheckpointMismatch):
        load_checkpoint(path, expected_config={**config, "width": 32})


def test_bad_magic_and_truncation():
    data = encode_checkpoint({"w": torch.ones(8)}, config)
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError):
        decode_checkpoint(data[:-4])


def test_malformed_header_is_a_checkpoint_error():
    data = encode_checkpoint({"w": torch.ones(2)}, config)
    header_length = int.from_bytes(data[5:9], "little")
    broken = data[:9] + b"[" * header_length + data[9 + header_length:]
    with pytest.raises(CheckpointError, match="malformed"):
        decode_checkpoint(broken)
    with pytest.raises(CheckpointError, match="misses"):
        decode_checkpoint(data[:5] + (2).to_bytes(4, "little") + b"{}")


def test_ema_arrays_win_by_default(tmp_path):
    arrays = {"a.w": torch.zeros(2), "ema.a.w": torch.ones(2)}
    checkpoint = Checkpoint(tmp_path / "x.ckpt", encode_checkpoint(arrays, config))
    assert torch.equal(checkpoint.state_dict("a.")["w"], torch.ones(2))
    assert torch.equal(checkpoint.state_dict("a.", use_ema=False)["w"], torch.zeros(2))
    assert set(checkpoint.state_dict("", use_ema=False)) == {"a.w"}


def test_loading_into_a_different_shape_fails(tmp_path):
    layer = nn.Linear(3, 2)
    arrays = {f"net.{name}": value for name, value in nn.Linear(4, 2).state_dict().items()}
    checkpoint = Checkpoint(tmp_path / "net.ckpt", encode_checkpoint(arrays, config))
    with pytest.raises(CheckpointMismatch):
        checkpoint.load_into(layer, "net.")


def test_checkpoint_repr_and_name(tmp_path):
    name = fake.word()
    checkpoint = Checkpoint(tmp_path / f"{name}.ckpt", encode_checkpoint({"w": torch.zeros(1)}, config))
    assert checkpoint.name == name
    assert name in repr(checkpoint)
