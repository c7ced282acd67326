import numpy as np
import pytest

from mownet import autodiff as ad
from mownet.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from mownet.errors import FormatError
from mownet.model import BackboneSpec, WeightNetSpec, init_backbone, init_weightnets


@pytest.fixture
def pair():
    theta = init_backbone(BackboneSpec(4, (6,), 3), 11)
    phi = init_weightnets(WeightNetSpec(3, 5), 12)
    return theta, phi


def test_round_trip_bit_exact(tmp_path, pair):
    theta, phi = pair
    path = tmp_path / "model.bin"
    save_checkpoint(path, theta, phi)
    theta2, phi2 = load_checkpoint(path)
    assert theta2.data_hash() == theta.data_hash()
    assert phi2.data_hash() == phi.data_hash()
    assert theta2.names() == theta.names()


def test_theta_only_checkpoint(tmp_path, pair):
    theta, _ = pair
    path = tmp_path / "theta.bin"
    save_checkpoint(path, theta)
    theta2, phi2 = load_checkpoint(path)
    assert phi2 is None
    assert theta2.data_hash() == theta.data_hash()


def test_bad_magic_rejected(tmp_path, pair):
    theta, _ = pair
    path = tmp_path / "bad.bin"
    save_checkpoint(path, theta)
    blob = bytearray(path.read_bytes())
    blob[:8] = b"NOTMAGIC"
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(path)


def test_truncation_reports_offset(tmp_path, pair):
    theta, _ = pair
    path = tmp_path / "trunc.bin"
    save_checkpoint(path, theta)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) - 5])
    with pytest.raises(FormatError, match="byte offset"):
        load_checkpoint(path)


def test_garbage_after_magic(tmp_path):
    path = tmp_path / "garbage.bin"
    path.write_bytes(MAGIC + b"\xff\xff\xff\xff" + b"xx")
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_missing_group_prefix_rejected(tmp_path):
    # a tensor named without theta/ or phi/ group must be refused
    import struct
    name = b"loose"
    payload = (MAGIC + struct.pack("<I", len(name)) + name
               + struct.pack("<I", 0) + np.float64(1.0).tobytes())
    path = tmp_path / "loose.bin"
    path.write_bytes(payload)
    with pytest.raises(FormatError, match="group"):
        load_checkpoint(path)


def test_scalar_and_high_rank_tensors_roundtrip(tmp_path):
    theta = ad.ParamSet([("layer0.weight", ad.leaf(np.random.default_rng(0).normal(size=(2, 3)))),
                         ("layer0.bias", ad.leaf(np.zeros(3))),
                         ("odd.scalar", ad.leaf(np.float64(3.25)))])
    path = tmp_path / "mixed.bin"
    save_checkpoint(path, theta)
    theta2, _ = load_checkpoint(path)
    assert theta2["odd.scalar"].shape == ()
    assert theta2.data_hash() == theta.data_hash()
