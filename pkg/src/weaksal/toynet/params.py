"""Named parameter tensors, initialisation and the checkpoint container.

Checkpoint layout (all integers little-endian uint32):

    b"ASMO" | version | repeated: name_len | name (utf-8) | rank | dims... | float32 data

Tensors run to end of file. Parameters are kept float32-representable so a
save/load round trip is bit-exact.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from weaksal.errors import MalformedFile, ShapeError
from weaksal.toynet.config import NetConfig

MAGIC = b"ASMO"
VERSION = 1
CLS_NAMES = ("cls.weight", "cls.bias")
SAL_HEAD_NAMES = ("sal.weight", "sal.bias")


def backbone_names(cfg: NetConfig) -> list[str]:
    names = []
    for i in range(len(cfg.backbone_channels)):
        names += [f"conv{i}.weight", f"conv{i}.bias"]
    return names


def expected_shapes(cfg: NetConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    c_in = 3
    for i, c_out in enumerate(cfg.backbone_channels):
        shapes[f"conv{i}.weight"] = (c_out, c_in, 3, 3)
        shapes[f"conv{i}.bias"] = (c_out,)
        c_in = c_out
    shapes["sal.weight"] = (2, c_in)
    shapes["sal.bias"] = (2,)
    shapes["cls.weight"] = (cfg.n_classes, cfg.feature_channels)
    shapes["cls.bias"] = (cfg.n_classes,)
    return shapes


class NetParams(dict):
    """Mapping name -> ndarray. Behaves like a dict with a few helpers."""

    def copy(self) -> NetParams:
        return NetParams({k: v.copy() for k, v in self.items()})

    def zeros_like(self) -> NetParams:
        return NetParams({k: np.zeros(v.shape) for k, v in self.items()})

    def n_values(self) -> int:
        return sum(v.size for v in self.values())

    def check(self, cfg: NetConfig) -> None:
        want = expected_shapes(cfg)
        if set(self) != set(want):
            raise ShapeError(f"parameter names {sorted(self)} do not match the network {sorted(want)}")
        for name, shape in want.items():
            if tuple(self[name].shape) != shape:
                raise ShapeError(f"{name} has shape {tuple(self[name].shape)}, expected {shape}")
            if not np.all(np.isfinite(self[name])):
                raise ShapeError(f"{name} has non-finite entries")


def init_params(cfg: NetConfig, seed: int) -> NetParams:
    """Zero biases, kernels uniform in +-sqrt(6 / (fan_in + fan_out))."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    params = NetParams()
    for name, shape in expected_shapes(cfg).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=np.float32)
            continue
        receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
        fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params[name] = rng.uniform(-limit, limit, size=shape).astype(np.float32)
    return params


def zero_params(cfg: NetConfig) -> NetParams:
    return NetParams({k: np.zeros(s, dtype=np.float32) for k, s in expected_shapes(cfg).items()})


def encode_checkpoint(tensors: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<I", VERSION)]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def decode_checkpoint(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != MAGIC:
        raise MalformedFile("not a checkpoint (bad magic)")
    if len(data) < 8:
        raise MalformedFile("truncated checkpoint header")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise MalformedFile(f"unsupported checkpoint version {version}")
    pos = 8
    tensors = {}
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + n].decode("utf-8")
            if len(name.encode("utf-8")) != n:
                raise MalformedFile("truncated tensor name")
            pos += n
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 4 * count > len(data):
                raise MalformedFile(f"truncated data for tensor {name!r}")
            tensors[name] = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * count
    except (struct.error, UnicodeDecodeError) as exc:
        raise MalformedFile(f"corrupt checkpoint: {exc}") from exc
    return tensors


def save_checkpoint(path, params: NetParams, cfg: NetConfig | None = None) -> None:
    tensors = dict(params)
    if cfg is not None:
        tensors["config.scales"] = np.asarray(cfg.scales, dtype=np.float32)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(tensors))


def load_checkpoint(path) -> tuple[NetParams, tuple[float, ...] | None]:
    """Parameters plus the stored scales (None if the file has none)."""
    tensors = decode_checkpoint(Path(path).read_bytes())
    scales = tensors.pop("config.scales", None)
    return NetParams(tensors), None if scales is None else tuple(float(s) for s in scales)


def config_from_params(params: NetParams, scales: tuple[float, ...]) -> NetConfig:
    """Recover the network shape a checkpoint was trained with."""
    n_conv = len([k for k in params if k.startswith("conv") and k.endswith(".weight")])
    channels = tuple(int(params[f"conv{i}.weight"].shape[0]) for i in range(n_conv))
    cfg = NetConfig(scales=tuple(scales), backbone_channels=channels,
                    n_classes=int(params["cls.weight"].shape[0]))
    params.check(cfg)
    return cfg
