"""Versioned binary checkpoints: parameters, optimizer moments, and a config
echo, so evaluation never needs the original training flags."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import CpfParams
from .tensor import Tensor
from .training import AdamState, TrainConfig

CHECKPOINT_MAGIC = b"CPFC"
CHECKPOINT_VERSION = 1

_HEADER = struct.Struct("<4sIq")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_F64 = struct.Struct("<d")


@dataclass
class Checkpoint:
    params: CpfParams
    adam: AdamState | None
    config: TrainConfig
    seed: int


def _config_to_lines(config: TrainConfig) -> str:
    def fmt(value) -> str:
        if value is None:
            return "none"
        if isinstance(value, bool):
            return "true" if value else "false"
        if isinstance(value, tuple):
            return ",".join(str(v) for v in value)
        return repr(value) if isinstance(value, float) else str(value)

    keys = sorted(TrainConfig.__dataclass_fields__)
    return "\n".join(f"{k} = {fmt(getattr(config, k))}" for k in keys)


def _config_from_lines(blob: str) -> TrainConfig:
    values: dict[str, str] = {}
    for line in blob.splitlines():
        if not line.strip():
            continue
        key, _, raw = line.partition("=")
        values[key.strip()] = raw.strip()
    kwargs = {}
    for name, fld in TrainConfig.__dataclass_fields__.items():
        if name not in values:
            continue
        raw = values[name]
        if raw == "none":
            kwargs[name] = None
        elif fld.type.startswith("bool"):
            kwargs[name] = raw == "true"
        elif fld.type.startswith("int"):
            kwargs[name] = int(raw)
        elif fld.type.startswith("float"):
            kwargs[name] = float(raw)
        elif fld.type.startswith("tuple"):
            kwargs[name] = tuple(int(v) for v in raw.split(","))
        else:
            kwargs[name] = raw
    return TrainConfig(**kwargs)


def _pack_array(arr: np.ndarray) -> bytes:
    rows, cols = arr.shape
    return _U32.pack(rows) + _U32.pack(cols) + arr.astype("<f8").tobytes()


def save_checkpoint(
    path: str | Path,
    params: CpfParams,
    config: TrainConfig,
    seed: int,
    adam: AdamState | None = None,
) -> None:
    parts = [_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, seed)]
    blob = _config_to_lines(config).encode("utf-8")
    parts.append(_U32.pack(len(blob)))
    parts.append(blob)
    named = params.named_tensors()
    parts.append(_U32.pack(len(named)))
    for name, tensor in named:
        raw = name.encode("utf-8")
        parts.append(_U16.pack(len(raw)))
        parts.append(raw)
        parts.append(_pack_array(tensor.data))
    if adam is None:
        parts.append(b"\x00")
    else:
        parts.append(b"\x01")
        parts.append(_U64.pack(adam.t))
        parts.append(_F64.pack(adam.beta1) + _F64.pack(adam.beta2) + _F64.pack(adam.eps))
        for name, _ in named:
            parts.append(_pack_array(adam.m[name]))
            parts.append(_pack_array(adam.v[name]))
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> Checkpoint:
    blob = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"truncated checkpoint while reading {what}", offset=pos)
        out = blob[pos : pos + n]
        pos += n
        return out

    def unpack_array(what: str) -> np.ndarray:
        (rows,) = _U32.unpack(take(4, f"{what} rows"))
        (cols,) = _U32.unpack(take(4, f"{what} cols"))
        raw = take(8 * rows * cols, f"{what} data")
        return np.frombuffer(raw, dtype="<f8").reshape(rows, cols).copy()

    magic, version, seed = _HEADER.unpack(take(_HEADER.size, "header"))
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}", offset=0)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    (cfg_len,) = _U32.unpack(take(4, "config length"))
    config = _config_from_lines(take(cfg_len, "config echo").decode("utf-8"))
    (n_params,) = _U32.unpack(take(4, "parameter count"))
    tensors: dict[str, Tensor] = {}
    order: list[str] = []
    for _ in range(n_params):
        (name_len,) = _U16.unpack(take(2, "parameter name length"))
        name = take(name_len, "parameter name").decode("utf-8")
        tensors[name] = Tensor(unpack_array(f"parameter {name}"), requires_grad=True)
        order.append(name)
    expected = [
        "proj_obj.w", "proj_obj.b", "proj_attr.w", "proj_attr.b", "fusion.w",
        "fusion.b", "comp_visual.w", "comp_visual.b", "comp_text.w", "comp_text.b",
    ]
    if order != expected:
        raise FormatError(f"unexpected parameter set {order}")
    params = CpfParams(
        *(tensors[name] for name in expected),
        tau=config.tau,
        alpha1=config.alpha1,
        alpha2=config.alpha2,
    )
    adam = None
    (have_adam,) = take(1, "optimizer flag")
    if have_adam:
        (t,) = _U64.unpack(take(8, "optimizer step"))
        (beta1,) = _F64.unpack(take(8, "beta1"))
        (beta2,) = _F64.unpack(take(8, "beta2"))
        (eps,) = _F64.unpack(take(8, "eps"))
        m, v = {}, {}
        for name in expected:
            m[name] = unpack_array(f"moment m[{name}]")
            v[name] = unpack_array(f"moment v[{name}]")
        adam = AdamState(m=m, v=v, t=t, beta1=beta1, beta2=beta2, eps=eps)
    if pos != len(blob):
        raise FormatError(f"{len(blob) - pos} trailing bytes", offset=pos)
    return Checkpoint(params=params, adam=adam, config=config, seed=seed)
