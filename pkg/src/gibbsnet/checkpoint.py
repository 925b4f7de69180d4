"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    magic      8 bytes   b"GIBBSNT\\0"
    version    u32
    cfg_hash   32 bytes  sha256 of the config text
    cfg_len    u32, then the config text (key=value lines, utf-8)
    meta_len   u32, then a JSON object (iteration, optimizer scalars, dims)
    n_blobs    u32, then per blob:
        name_len u16, name (utf-8), ndim u8, dims u32 * ndim, float64 data
    trailer    32 bytes  sha256 of everything above
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CorruptCheckpointError, FormatError
from .trainer import Networks, TrainConfig, build_networks, build_optimizers, parse_config_text

MAGIC = b"GIBBSNT\x00"
VERSION = 1


@dataclass
class Checkpoint:
    config: TrainConfig
    nets: Networks
    opts: dict
    iteration: int
    meta: dict


def _blobs(nets: Networks, opts: dict):
    for role, net in nets.items():
        for name, t in net.named_tensors():
            yield f"{role}/{name}", t.data
        state = opts[role]
        names = [n for n, _ in net.named_tensors()]
        for name, m, v in zip(names, state.first_moment, state.second_moment):
            yield f"adam/{role}/m/{name}", m
            yield f"adam/{role}/v/{name}", v


def encode_checkpoint(config: TrainConfig, nets: Networks, opts: dict, iteration: int) -> bytes:
    cfg = config.to_text().encode()
    meta = {
        "iteration": int(iteration),
        "dim_x": nets.encoder.dim_x,
        "n_labels": nets.encoder.n_labels,
        "adam": {role: {"step_count": s.step_count, "lr": s.lr, "beta1": s.beta1, "beta2": s.beta2,
                        "eps": s.eps} for role, s in opts.items()},
    }
    meta_b = json.dumps(meta, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", VERSION), hashlib.sha256(cfg).digest(),
             struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(meta_b)), meta_b]
    blobs = list(_blobs(nets, opts))
    parts.append(struct.pack("<I", len(blobs)))
    for name, arr in blobs:
        nb = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(path, config: TrainConfig, nets: Networks, opts: dict, iteration: int) -> str:
    """Write a checkpoint; returns the sha256 hex digest of the file."""
    data = encode_checkpoint(config, nets, opts, iteration)
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("checkpoint truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC) + 36 or data[:len(MAGIC)] != MAGIC:
        raise FormatError("not a GibbsNet checkpoint (bad magic)")
    body, trailer = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != trailer:
        raise CorruptCheckpointError("checkpoint content hash mismatch")
    r = _Reader(body)
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    cfg_hash = r.take(32)
    (cfg_len,) = r.unpack("<I")
    cfg_text = r.take(cfg_len)
    if hashlib.sha256(cfg_text).digest() != cfg_hash:
        raise CorruptCheckpointError("config hash mismatch")
    (meta_len,) = r.unpack("<I")
    meta = json.loads(r.take(meta_len))
    (n_blobs,) = r.unpack("<I")
    blobs = {}
    for _ in range(n_blobs):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        (ndim,) = r.unpack("<B")
        dims = r.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(dims)) if dims else 1
        blobs[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(dims).astype(np.float64)

    config = TrainConfig.from_mapping(parse_config_text(cfg_text.decode()))
    nets = build_networks(config, meta["dim_x"], meta["n_labels"])
    opts = build_optimizers(config, nets)
    for role, net in nets.items():
        names = [n for n, _ in net.named_tensors()]
        for name, t in net.named_tensors():
            arr = blobs.get(f"{role}/{name}")
            if arr is None or arr.shape != t.shape:
                raise FormatError(f"checkpoint blob {role}/{name} missing or mis-shaped")
            t.data = arr
        st = opts[role]
        hyper = meta["adam"][role]
        st.step_count = hyper["step_count"]
        st.lr, st.beta1, st.beta2, st.eps = hyper["lr"], hyper["beta1"], hyper["beta2"], hyper["eps"]
        st.first_moment = [blobs[f"adam/{role}/m/{n}"] for n in names]
        st.second_moment = [blobs[f"adam/{role}/v/{n}"] for n in names]
    return Checkpoint(config, nets, opts, meta["iteration"], meta)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


def file_digest(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


__all__ = ["Checkpoint", "decode_checkpoint", "encode_checkpoint", "file_digest",
           "load_checkpoint", "save_checkpoint"]
