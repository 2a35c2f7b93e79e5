"""Binary checkpoint container and config (de)serialization.

Checkpoint byte layout (all integers little-endian):
    magic    4 bytes   b"KVMC"
    version  u32       1
    cfg_len  u64       length of the UTF-8 config JSON that follows
    config   cfg_len   the resolved config document
    count    u32       number of named tensors
    per tensor:
        name_len u16, name (UTF-8), dtype u8 (0=float32, 1=float64),
        ndim u8, dims u32 * ndim, payload (row-major, little-endian)
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict

import numpy as np

from .kvm import AblationFlags, KvmConfig, StateSchedule
from .model import GptAlphaConfig, GptAlphaParams, init_params

_MAGIC = b"KVMC"
_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def save_checkpoint(path, tensors: dict[str, np.ndarray], config_text: str) -> None:
    buf = io.BytesIO()
    buf.write(_MAGIC)
    cfg = config_text.encode("utf-8")
    buf.write(struct.pack("<IQ", _VERSION, len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        name_b = name.encode("utf-8")
        code = _DTYPE_CODES[arr.dtype]
        buf.write(struct.pack("<H", len(name_b)))
        buf.write(name_b)
        buf.write(struct.pack("<BB", code, arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(arr.astype(_DTYPES[code]).tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], str]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, cfg_len = struct.unpack_from("<IQ", blob, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    config_text = blob[off:off + cfg_len].decode("utf-8")
    off += cfg_len
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        code, ndim = struct.unpack_from("<BB", blob, off)
        off += 2
        dims = struct.unpack_from(f"<{ndim}I", blob, off) if ndim else ()
        off += 4 * ndim
        dtype = _DTYPES[code]
        size = int(np.prod(dims, dtype=np.int64)) if dims else 1
        arr = np.frombuffer(blob, dtype=dtype, count=size, offset=off)
        off += size * dtype.itemsize
        tensors[name] = arr.reshape(dims).astype(dtype.newbyteorder("="))
    return tensors, config_text


# ---------------------------------------------------------------------------
# Config <-> JSON

def schedule_to_dict(s: StateSchedule) -> dict:
    return asdict(s)


def schedule_from_dict(d: dict) -> StateSchedule:
    return StateSchedule(**d)


def kvm_config_to_dict(c: KvmConfig) -> dict:
    out = asdict(c)
    return out


def kvm_config_from_dict(d: dict) -> KvmConfig:
    d = dict(d)
    d["schedule"] = schedule_from_dict(d["schedule"])
    d["ablations"] = AblationFlags(**d["ablations"])
    return KvmConfig(**d)


def model_config_to_json(c: GptAlphaConfig) -> str:
    d = asdict(c)
    d["layer_modes"] = list(c.layer_modes)
    return json.dumps(d, indent=2, sort_keys=True)


def model_config_from_json(text: str) -> GptAlphaConfig:
    d = json.loads(text)
    d["layer_modes"] = tuple(d["layer_modes"])
    d["kvm"] = kvm_config_from_dict(d["kvm"])
    cfg = GptAlphaConfig(**d)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# Model checkpoints

def save_model(path, params: GptAlphaParams, config: GptAlphaConfig,
               extra: dict[str, np.ndarray] | None = None) -> None:
    """Write all named parameters (plus optional extra arrays, e.g. optimizer
    moments under their own prefix) with the config embedded as JSON."""
    tensors = {name: p.data for name, p in params.named_parameters()}
    if extra:
        for name, arr in extra.items():
            tensors[name] = arr
    save_checkpoint(path, tensors, model_config_to_json(config))


def load_model(path) -> tuple[GptAlphaParams, GptAlphaConfig, dict[str, np.ndarray]]:
    """Reconstruct params/config; leftover arrays are returned as extras."""
    tensors, config_text = load_checkpoint(path)
    config = model_config_from_json(config_text)
    params = init_params(config, seed=0)
    extras = dict(tensors)
    for name, p in params.named_parameters():
        if name not in extras:
            raise ValueError(f"checkpoint is missing parameter {name!r}")
        arr = extras.pop(name)
        if tuple(arr.shape) != tuple(p.shape):
            raise ValueError(f"checkpoint parameter {name!r} has shape "
                             f"{arr.shape}, expected {p.shape}")
        p.data = arr.astype(config.np_dtype)
    return params, config, extras
