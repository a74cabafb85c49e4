"""SMOG1 checkpoint files.

Layout (all integers little-endian)::

    b"SMOG1"
    u32 header byte length, UTF-8 "key=value" lines
    repeated: u32 name length, UTF-8 name, u32 rank, rank x i64 dims,
              prod(dims) x f32 data

The header carries the model config (``model.*``), optional training
config (``train.*``) and bookkeeping such as the step. Optimizer moments
are stored as ordinary records under ``adam.m/`` and ``adam.v/``.
"""

from dataclasses import dataclass
import os
import struct

import numpy as np

from . import autodiff as ad
from .network import Model, ModelConfig

MAGIC = b"SMOG1"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: Model
    header: dict
    adam: dict = None
    step: int = 0


def _header_text(header):
    lines = []
    for k, v in header.items():
        s = str(v)
        if "\n" in s or "=" in k:
            raise CheckpointError(f"header entry {k!r} is not representable")
        lines.append(f"{k}={s}")
    return "\n".join(lines)


def _record(name, arr):
    arr = np.asarray(arr, dtype="<f4", order="C")
    raw = name.encode("utf-8")
    parts = [struct.pack("<I", len(raw)), raw, struct.pack("<I", arr.ndim)]
    parts.append(np.asarray(arr.shape, dtype="<i8").tobytes())
    parts.append(arr.tobytes())
    return b"".join(parts)


def encode(tensors, header):
    """Serialize ``name -> array`` plus a header dict to bytes."""
    text = _header_text(header).encode("utf-8")
    out = [MAGIC, struct.pack("<I", len(text)), text]
    out += [_record(name, arr) for name, arr in tensors.items()]
    return b"".join(out)


def decode(buf):
    """Inverse of :func:`encode`; validates every length against the buffer."""
    if buf[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a SMOG1 checkpoint (bad magic)")
    pos = len(MAGIC)

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint while reading {what} at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    (hlen,) = struct.unpack("<I", take(4, "header length"))
    header = {}
    for line in take(hlen, "header").decode("utf-8").splitlines():
        if line:
            key, _, val = line.partition("=")
            header[key] = val
    tensors = {}
    while pos < len(buf):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, f"rank of {name}"))
        dims = np.frombuffer(take(8 * rank, f"dims of {name}"), dtype="<i8")
        if np.any(dims < 0):
            raise CheckpointError(f"negative dimension in {name}")
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(4 * count, f"data of {name}"), dtype="<f4")
        if name in tensors:
            raise CheckpointError(f"duplicate record {name}")
        tensors[name] = data.reshape(tuple(int(d) for d in dims)).copy()
    return tensors, header


def save(path, model, state=None, step=0, train_config=None, extra=None):
    """Write model weights (and optionally optimizer state) atomically."""
    if np.dtype(model.dtype) != np.float32:
        model = model.astype(np.float32)
    header = {"format": "SMOG1", "step": int(step)}
    header.update({f"model.{k}": v for k, v in model.config.to_dict().items()})
    if train_config is not None:
        header.update({f"train.{k}": v for k, v in train_config.to_dict().items()})
    tensors = {name: p.data for name, p in model.named_parameters()}
    if state is not None:
        header["adam.step"] = state.step
        header["adam.skipped"] = state.skipped
        names = [n for n, _ in model.named_parameters()]
        for n, m, v in zip(names, state.m, state.v):
            tensors["adam.m/" + n] = m
            tensors["adam.v/" + n] = v
    if extra:
        header.update(extra)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode(tensors, header))
    os.replace(tmp, path)


def load(path):
    with open(path, "rb") as fh:
        tensors, header = decode(fh.read())
    cfg = ModelConfig.from_dict({k[6:]: v for k, v in header.items() if k.startswith("model.")})
    reference = Model(cfg)
    params = {}
    for name, p in reference.named_parameters():
        if name not in tensors:
            raise CheckpointError(f"checkpoint is missing parameter {name}")
        arr = tensors[name]
        if arr.shape != p.shape:
            raise CheckpointError(f"{name}: expected shape {p.shape}, found {arr.shape}")
        params[name] = ad.Tensor(arr, requires_grad=True, name=name)
    unknown = [n for n in tensors if n not in params and not n.startswith("adam.")]
    if unknown:
        raise CheckpointError(f"unexpected record {unknown[0]}")
    adam = None
    if "adam.step" in header:
        adam = {"step": int(header["adam.step"]), "skipped": int(header.get("adam.skipped", 0)),
                "m": [tensors["adam.m/" + n] for n in params],
                "v": [tensors["adam.v/" + n] for n in params]}
    return Checkpoint(Model(cfg, np.float32, params), header, adam, int(header.get("step", 0)))


def train_config_from(header):
    from .trainer import TrainConfig
    d = {k[6:]: v for k, v in header.items() if k.startswith("train.")}
    return TrainConfig.from_dict(d) if d else None


def restore_state(ckpt, model):
    """Rebuild an :class:`~smogup.trainer.AdamState` from a loaded checkpoint."""
    from .trainer import AdamState
    state = AdamState(model.parameters())
    if ckpt.adam is not None:
        state.step = ckpt.adam["step"]
        state.skipped = ckpt.adam["skipped"]
        state.m = [np.array(a, dtype=model.dtype) for a in ckpt.adam["m"]]
        state.v = [np.array(a, dtype=model.dtype) for a in ckpt.adam["v"]]
    return state
