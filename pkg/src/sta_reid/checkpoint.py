"""Versioned training checkpoints (STAC format).

Layout, all integers little-endian u32: magic "STAC", version (=1), epoch,
length-prefixed UTF-8 config echo, length-prefixed UTF-8 RNG state, tensor
count, then per tensor a length-prefixed name, rank, dims and the float32
payload.  Tensors are written sorted by name so identical runs produce
byte-identical files.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .config import RunConfig, config_text, parse_config_text
from .errors import FormatError, VersionError
from .optim import AdamState

__all__ = [
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "rng_state_text",
    "rng_from_text",
]

STAC_MAGIC = b"STAC"
STAC_VERSION = 1
_U32 = struct.Struct("<I")


@dataclass
class Checkpoint:
    """Model parameters, optimizer state, config echo, epoch, RNG state."""

    params: dict
    opt: AdamState
    cfg: RunConfig
    epoch: int
    rng_state: str


def rng_state_text(rng):
    """Serialize a numpy Generator backed by PCG64 as one text line."""
    state = rng.bit_generator.state
    if state["bit_generator"] != "PCG64":
        raise ValueError(f"unsupported bit generator {state['bit_generator']!r}")
    inner = state["state"]
    return f"PCG64:{inner['state']}:{inner['inc']}:{state['has_uint32']}:{state['uinteger']}"


def rng_from_text(text):
    """Rebuild the numpy Generator serialized by rng_state_text."""
    parts = text.split(":")
    if len(parts) != 5 or parts[0] != "PCG64":
        raise FormatError(f"malformed RNG state {text!r}")
    bit_gen = np.random.PCG64()
    bit_gen.state = {
        "bit_generator": "PCG64",
        "state": {"state": int(parts[1]), "inc": int(parts[2])},
        "has_uint32": int(parts[3]),
        "uinteger": int(parts[4]),
    }
    return np.random.Generator(bit_gen)


def _write_block(fh, payload):
    fh.write(_U32.pack(len(payload)))
    fh.write(payload)


def _tensor_entries(ckpt):
    entries = {f"param.{name}": arr for name, arr in ckpt.params.items()}
    entries.update({f"opt.m.{name}": arr for name, arr in ckpt.opt.m.items()})
    entries.update({f"opt.v.{name}": arr for name, arr in ckpt.opt.v.items()})
    entries["opt.step"] = np.array([ckpt.opt.step], dtype=np.float32)
    return entries


def save_checkpoint(path, ckpt):
    """Write a checkpoint; float32 payloads, tensors sorted by name."""
    entries = _tensor_entries(ckpt)
    with open(path, "wb") as fh:
        fh.write(STAC_MAGIC)
        fh.write(_U32.pack(STAC_VERSION))
        fh.write(_U32.pack(ckpt.epoch))
        _write_block(fh, config_text(ckpt.cfg).encode("utf-8"))
        _write_block(fh, ckpt.rng_state.encode("utf-8"))
        fh.write(_U32.pack(len(entries)))
        for name in sorted(entries):
            arr = np.ascontiguousarray(entries[name], dtype=np.float32)
            _write_block(fh, name.encode("utf-8"))
            fh.write(_U32.pack(arr.ndim))
            for dim in arr.shape:
                fh.write(_U32.pack(dim))
            fh.write(arr.tobytes())


class _Reader:
    def __init__(self, path, blob):
        self.path = path
        self.blob = blob
        self.offset = 0

    def take(self, size, what):
        if self.offset + size > len(self.blob):
            raise FormatError(f"{self.path}: {what} truncated at byte {len(self.blob)}")
        chunk = self.blob[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def u32(self, what):
        return _U32.unpack(self.take(4, what))[0]

    def block(self, what):
        return self.take(self.u32(what + " length"), what)


def load_checkpoint(path):
    """Read a STAC checkpoint written by save_checkpoint."""
    with open(path, "rb") as fh:
        blob = fh.read()
    reader = _Reader(path, blob)
    magic = reader.take(4, "magic")
    if magic != STAC_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0, expected {STAC_MAGIC!r}")
    version = reader.u32("version")
    if version != STAC_VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version} at byte 4")
    epoch = reader.u32("epoch")
    cfg = parse_config_text(reader.block("config echo").decode("utf-8"))
    rng_state = reader.block("rng state").decode("utf-8")
    count = reader.u32("tensor count")
    tensors = {}
    for i in range(count):
        name = reader.block(f"tensor {i} name").decode("utf-8")
        rank = reader.u32(f"tensor {name} rank")
        dims = tuple(reader.u32(f"tensor {name} dim {d}") for d in range(rank))
        size = int(np.prod(dims)) if dims else 1
        payload = reader.take(4 * size, f"tensor {name} payload")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()

    params, m, v, step = {}, {}, {}, 0
    for name, arr in tensors.items():
        if name == "opt.step":
            step = int(arr[0])
        elif name.startswith("param."):
            params[name[len("param."):]] = arr
        elif name.startswith("opt.m."):
            m[name[len("opt.m."):]] = arr
        elif name.startswith("opt.v."):
            v[name[len("opt.v."):]] = arr
        else:
            raise FormatError(f"{path}: unknown tensor name {name!r}")
    if set(m) != set(params) or set(v) != set(params):
        raise FormatError(f"{path}: optimizer tensors do not match parameter tensors")
    opt = AdamState(m=m, v=v, step=step, beta1=cfg.beta1, beta2=cfg.beta2,
                    eps=cfg.eps, weight_decay=cfg.weight_decay)
    return Checkpoint(params=params, opt=opt, cfg=cfg, epoch=epoch, rng_state=rng_state)
