"""Named parameters, Adam, and the checkpoint container."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable

import numpy as np

from .tensor import ShapeError, Tensor

CHECKPOINT_MAGIC = b"GCCPCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def glorot_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class ParamStore:
    """Parameters by name with their Adam moments and a global step counter."""

    params: dict[str, Tensor] = field(default_factory=dict)
    adam: AdamConfig = field(default_factory=AdamConfig)
    step: int = 0
    _m: dict[str, np.ndarray] = field(default_factory=dict)
    _v: dict[str, np.ndarray] = field(default_factory=dict)

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already exists")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = t
        self._m[name] = np.zeros_like(t.data)
        self._v[name] = np.zeros_like(t.data)
        return t

    def glorot(self, name: str, shape: tuple, rng: np.random.Generator, fan_in: int | None = None,
               fan_out: int | None = None) -> Tensor:
        fan_in = fan_in if fan_in is not None else shape[0]
        fan_out = fan_out if fan_out is not None else shape[-1]
        return self.add(name, glorot_uniform(rng, shape, fan_in, fan_out))

    def zeros(self, name: str, shape: tuple) -> Tensor:
        return self.add(name, np.zeros(shape))

    def ones(self, name: str, shape: tuple) -> Tensor:
        return self.add(name, np.ones(shape))

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad[...] = 0.0

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(t.grad ** 2)) for t in self.params.values())))

    def adam_step(self, lr: float) -> None:
        """One bias-corrected Adam update on every parameter, then clear gradients."""
        self.step += 1
        b1, b2, eps = self.adam.beta1, self.adam.beta2, self.adam.eps
        c1 = 1.0 - b1 ** self.step
        c2 = 1.0 - b2 ** self.step
        for name, t in self.params.items():
            g = t.grad
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            t.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
            g[...] = 0.0

    def values(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_values(self, values: dict[str, np.ndarray], prefix: str = "") -> None:
        """Overwrite parameters from ``values`` (keys optionally namespaced by ``prefix``)."""
        for name, t in self.params.items():
            key = prefix + name
            if key not in values:
                raise CheckpointError(f"checkpoint has no tensor {key!r}")
            arr = np.asarray(values[key], dtype=np.float64)
            if arr.shape != t.shape:
                raise CheckpointError(f"tensor {key!r} has shape {arr.shape}, expected {t.shape}")
            t.data[...] = arr


def write_checkpoint(fh: BinaryIO, tensors: dict[str, np.ndarray]) -> None:
    """Version header, tensor count, then (name, shape, little-endian float64 data) records."""
    fh.write(CHECKPOINT_MAGIC)
    fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        raw = name.encode("utf-8")
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("checkpoint is truncated")
    return buf


def read_checkpoint(fh: BinaryIO) -> dict[str, np.ndarray]:
    if _read_exact(fh, len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file")
    version, count = struct.unpack("<II", _read_exact(fh, 8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", _read_exact(fh, 2))
        name = _read_exact(fh, n).decode("utf-8")
        (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
        shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim))
        count_vals = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(_read_exact(fh, 8 * count_vals), dtype="<f8").astype(np.float64)
        out[name] = data.reshape(shape)
    return out


def namespaced(prefix: str, store: ParamStore) -> dict[str, np.ndarray]:
    return {prefix + k: v for k, v in store.values().items()}


def save_stores(path, stores: Iterable[tuple[str, ParamStore]]) -> None:
    tensors = {}
    for prefix, store in stores:
        tensors.update(namespaced(prefix, store))
    with open(path, "wb") as fh:
        write_checkpoint(fh, tensors)


def load_stores(path, stores: Iterable[tuple[str, ParamStore]]) -> None:
    with open(path, "rb") as fh:
        tensors = read_checkpoint(fh)
    for prefix, store in stores:
        store.load_values(tensors, prefix)


def check_same_shapes(a: ParamStore, b: ParamStore) -> None:
    for name in a.params:
        if name not in b.params or a[name].shape != b[name].shape:
            raise ShapeError(f"parameter {name!r} differs between stores")
