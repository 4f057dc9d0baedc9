import struct
import zlib

import numpy as np
import pytest

from mhitnet.checkpoint import MAGIC, VERSION, decode_state, encode_state, load_checkpoint, save_checkpoint
from mhitnet.errors import CorruptionError, DimensionError, FormatError, UnsupportedVersionError
from mhitnet.network import EncoderSpec, MhitNet, NetConfig
from mhitnet.tensor import Tensor, no_grad


def _forward(net, x):
    net.eval()
    with no_grad():
        return net(Tensor(x)).data


def test_save_load_save_identical_and_forward_bit_exact(tmp_path, tiny_cfg, rng):
    net = MhitNet(tiny_cfg, seed=2)
    for _, buf in net.named_buffers():
        buf[...] = rng.uniform(0.5, 1.5, buf.shape)
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(a, net)
    other = load_checkpoint(a, MhitNet(tiny_cfg, seed=9))
    save_checkpoint(b, other)
    assert a.read_bytes() == b.read_bytes()
    x = rng.standard_normal((2, 1, 16, 16)).astype(np.float32)
    assert _forward(net, x).tobytes() == _forward(other, x).tobytes()


def test_layout():
    state = {"w": np.arange(6, dtype=np.float32).reshape(2, 3)}
    buf = encode_state(state)
    assert buf[:4] == MAGIC
    assert struct.unpack_from("<III", buf, 4) == (VERSION, 1, 1)
    assert buf[16:17] == b"w"
    assert struct.unpack_from("<III", buf, 17) == (2, 2, 3)
    assert np.frombuffer(buf, "<f4", 6, 29).tolist() == list(range(6))
    assert struct.unpack("<I", buf[-4:])[0] == zlib.crc32(buf[:-4])
    assert np.array_equal(decode_state(buf)["w"], state["w"])


def test_flipped_byte_is_detected(tmp_path, tiny_net):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, tiny_net)
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(CorruptionError):
        load_checkpoint(path, tiny_net)


def test_unsupported_version():
    body = bytearray(encode_state({"w": np.zeros(2, np.float32)})[:-4])
    struct.pack_into("<I", body, 4, VERSION + 1)
    buf = bytes(body) + struct.pack("<I", zlib.crc32(bytes(body)))
    with pytest.raises(UnsupportedVersionError, match="version"):
        decode_state(buf)


def test_bad_magic():
    body = b"XXXX" + encode_state({})[4:-4]
    with pytest.raises(FormatError):
        decode_state(body + struct.pack("<I", zlib.crc32(body)))


def test_architecture_mismatch_names_parameter(tmp_path, tiny_cfg):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, MhitNet(tiny_cfg))
    wider = NetConfig(EncoderSpec(width=0.25, blocks_per_stage=(1, 1, 1, 1)), image_size=16)
    with pytest.raises(DimensionError, match="encoder.stem_conv.weight"):
        load_checkpoint(path, MhitNet(wider))


def test_module_mismatch_lists_missing(tmp_path, tiny_cfg):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, MhitNet(tiny_cfg.with_modules(False, False, False)))
    with pytest.raises(DimensionError, match="skips.0.rapp"):
        load_checkpoint(path, MhitNet(tiny_cfg))
