import hashlib
import struct

import numpy as np
import numpy.testing as npt
import pytest

from gibbsnet.checkpoint import MAGIC, decode_checkpoint, encode_checkpoint, file_digest, load_checkpoint, save_checkpoint
from gibbsnet.errors import CorruptCheckpointError, FormatError
from gibbsnet.trainer import TrainConfig, build_dataset, train


@pytest.fixture(scope="module")
def trained():
    cfg = TrainConfig(hidden=8, depth=1, batch_size=16, n_data=200, modes=3, iterations=4, label_modeling=True)
    return cfg, train(cfg, build_dataset(cfg))


def test_round_trip(trained, tmp_path):
    cfg, res = trained
    path = tmp_path / "a.gbn"
    digest = save_checkpoint(path, cfg, res.nets, res.opts, res.iteration)
    assert digest == file_digest(path) == hashlib.sha256(path.read_bytes()).hexdigest()
    ck = load_checkpoint(path)
    assert ck.config == cfg and ck.iteration == 4
    for (role, net), (_, other) in zip(res.nets.items(), ck.nets.items()):
        for (name, a), (_, b) in zip(net.named_tensors(), other.named_tensors()):
            npt.assert_array_equal(a.data, b.data, err_msg=f"{role}/{name}")
        assert ck.opts[role].step_count == res.opts[role].step_count
    assert ck.nets.decoder.n_labels == 3


def test_encoding_is_deterministic_and_little_endian(trained):
    cfg, res = trained
    data = encode_checkpoint(cfg, res.nets, res.opts, 4)
    assert data == encode_checkpoint(cfg, res.nets, res.opts, 4)
    assert data.startswith(MAGIC)
    assert struct.unpack("<I", data[8:12]) == (1,)
    assert data[12:44] == hashlib.sha256(cfg.to_text().encode()).digest()


def test_any_flipped_byte_is_detected(trained):
    cfg, res = trained
    data = bytearray(encode_checkpoint(cfg, res.nets, res.opts, 4))
    for pos in np.random.default_rng(0).integers(len(MAGIC), len(data), size=25):
        bad = bytearray(data)
        bad[pos] ^= 0x01
        with pytest.raises(CorruptCheckpointError):
            decode_checkpoint(bytes(bad))


def test_bad_magic_and_truncation(trained):
    cfg, res = trained
    data = encode_checkpoint(cfg, res.nets, res.opts, 4)
    with pytest.raises(FormatError):
        decode_checkpoint(b"NOTACKPT" + data[8:])
    with pytest.raises(FormatError):
        decode_checkpoint(data[:20])
    # a truncated file fails its trailer hash
    with pytest.raises(CorruptCheckpointError):
        decode_checkpoint(data[:-100])


def test_resealed_but_malformed_body_is_a_format_error(trained):
    cfg, res = trained
    body = encode_checkpoint(cfg, res.nets, res.opts, 4)[:-32]
    body = body[:-40]
    with pytest.raises(FormatError):
        decode_checkpoint(body + hashlib.sha256(body).digest())
