# checkpoint.py

"""Binary checkpoints.

Layout (all integers little-endian)::

    "MSPF" | u32 version=1 | u32 count | count x tensor
    tensor: u16 name length | UTF-8 name | u8 ndim | ndim x u32 extent | float32 data
    optional "OPTM" | u32 count | count x tensor (names suffixed .m / .v) | u64 t
    optional "META" | u32 length | UTF-8 text: key=value lines, a blank line, then the INI config
"""

import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .config import RunConfig, from_ini
from .errors import FormatError
from .model import MSPFormer
from .optimizer import OptimState
from .tensor import get_default_dtype

logger = logging.getLogger(__name__)

MAGIC = b"MSPF"
VERSION = 1
OPTIM_TAG = b"OPTM"
META_TAG = b"META"


@dataclass
class Checkpoint:
    tensors: dict
    moments: Optional[dict] = None  # name -> array, names end in .m / .v
    t: int = 0
    meta: dict = field(default_factory=dict)
    config_text: str = ""

    @property
    def epoch(self):
        return int(self.meta.get("epoch", 0))

    @property
    def step(self):
        return int(self.meta.get("step", 0))


# --- Encoding ---

def _pack_tensor(name, data):
    encoded = name.encode("utf-8")
    array = np.ascontiguousarray(data, dtype="<f4")
    parts = [struct.pack("<H", len(encoded)), encoded, struct.pack("<B", array.ndim)]
    parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
    parts.append(array.tobytes())
    return b"".join(parts)


def encode_checkpoint(tensors, moments=None, t=0, meta=None, config_text=""):
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    parts.extend(_pack_tensor(name, data) for name, data in tensors.items())
    if moments is not None:
        parts.append(OPTIM_TAG + struct.pack("<I", len(moments)))
        parts.extend(_pack_tensor(name, data) for name, data in moments.items())
        parts.append(struct.pack("<Q", t))
    if meta is not None or config_text:
        lines = [f"{key}={value}" for key, value in (meta or {}).items()]
        text = ("\n".join(lines) + "\n\n" + config_text).encode("utf-8")
        parts.append(META_TAG + struct.pack("<I", len(text)) + text)
    return b"".join(parts)


# --- Decoding ---

class _Reader:
    def __init__(self, raw):
        self.raw = raw
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.raw):
            raise FormatError(f"truncated checkpoint while reading {what}", offset=self.pos)
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def tensor(self):
        start = self.pos
        (length,) = self.unpack("<H", "name length")
        try:
            name = self.take(length, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not valid UTF-8", offset=start + 2) from None
        (ndim,) = self.unpack("<B", "rank")
        shape = self.unpack(f"<{ndim}I", "extents")
        count = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(self.take(4 * count, f"data of {name}"), dtype="<f4").reshape(shape)
        return name, data.copy()


def decode_checkpoint(raw):
    reader = _Reader(raw)
    if reader.take(4, "magic") != MAGIC:
        raise FormatError("not a checkpoint (bad magic)", offset=0)
    version, count = reader.unpack("<II", "header")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    tensors = {}
    for _ in range(count):
        offset = reader.pos
        name, data = reader.tensor()
        if name in tensors:
            raise FormatError(f"duplicate tensor '{name}'", offset=offset)
        tensors[name] = data
    ckpt = Checkpoint(tensors)

    while reader.pos < len(raw):
        offset = reader.pos
        tag = reader.take(4, "section tag")
        if tag == OPTIM_TAG:
            (n,) = reader.unpack("<I", "moment count")
            ckpt.moments = dict(reader.tensor() for _ in range(n))
            (ckpt.t,) = reader.unpack("<Q", "step counter")
        elif tag == META_TAG:
            (n,) = reader.unpack("<I", "metadata length")
            try:
                text = reader.take(n, "metadata").decode("utf-8")
            except UnicodeDecodeError:
                raise FormatError("metadata is not valid UTF-8", offset=offset + 8) from None
            head, _, ckpt.config_text = text.partition("\n\n")
            for line in head.splitlines():
                key, sep, value = line.partition("=")
                if not sep:
                    raise FormatError(f"malformed metadata line '{line}'", offset=offset + 8)
                ckpt.meta[key] = value
        else:
            raise FormatError(f"unknown section tag {tag!r}", offset=offset)
    return ckpt


# --- Files ---

def save_checkpoint(path, model: MSPFormer, state: Optional[OptimState] = None, meta=None, config_text=""):
    """Writes model parameters, optionally optimizer moments and metadata, atomically."""
    moments = None
    t = 0
    if state is not None:
        moments = {}
        for name in model.params:
            if name in state.m:
                moments[f"{name}.m"] = state.m[name]
                moments[f"{name}.v"] = state.v[name]
        t = state.t
    raw = encode_checkpoint({name: p.data for name, p in model.params.items()}, moments, t, meta, config_text)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(raw)
    os.replace(tmp, path)
    logger.debug("checkpoint=%s bytes=%d", path, len(raw))


def read_checkpoint(path):
    with open(path, "rb") as f:
        return decode_checkpoint(f.read())


def restore_state(ckpt: Checkpoint, state: OptimState):
    """Copies saved moments and the step counter into ``state``."""
    if ckpt.moments is None:
        return state
    for name, data in ckpt.moments.items():
        base, suffix = name.rsplit(".", 1)
        target = state.m if suffix == "m" else state.v
        target[base] = data.astype(get_default_dtype())
    state.t = ckpt.t
    return state


def load_model(path):
    """Builds the model described by a checkpoint's config and loads its parameters.

    Returns:
        (model, checkpoint, run_config)
    """
    ckpt = read_checkpoint(path)
    cfg = from_ini(ckpt.config_text) if ckpt.config_text.strip() else RunConfig()
    model = MSPFormer(cfg.model, seed=cfg.train.seed)
    model.load_state(ckpt.tensors)
    logger.info("checkpoint=%s epoch=%d step=%d", path, ckpt.epoch, ckpt.step)
    return model, ckpt, cfg
