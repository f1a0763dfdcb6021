"""Named parameters grouped by phase, SGD with momentum, and checkpoint files.

Checkpoint layout (all integers little-endian)::

    magic      8 bytes  b"ARPNCKPT"
    version    uint32   currently 1
    count      uint32   number of records
    record * count:
        name_len uint32, name utf-8 bytes
        ndim     uint32, dims uint64 * ndim
        values   float64 * prod(dims), row-major

Records are written in sorted name order so identical stores give
byte-identical files.
"""

from __future__ import annotations

import re
import struct
from pathlib import Path

import numpy as np

from arped.tensor import DTYPE, Tensor

MAGIC = b"ARPNCKPT"
VERSION = 1

_PHASE = re.compile(r"^phase(\d+)\.")


def phase_of(name: str) -> int | None:
    m = _PHASE.match(name)
    return int(m.group(1)) if m else None


class ParamStore:
    """Trainable tensors plus non-trainable buffers (normalization statistics).

    Names are globally unique; a name beginning with ``phase{k}.`` belongs to
    phase ``k``.  Phases never share a tensor.
    """

    def __init__(self, seed: int = 0):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.rng = np.random.default_rng(seed)

    def __contains__(self, name: str) -> bool:
        return name in self.params or name in self.buffers

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def _check_new(self, name: str) -> None:
        if name in self:
            raise KeyError(f"duplicate parameter name {name!r}")

    def add(self, name: str, value) -> Tensor:
        self._check_new(name)
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def add_buffer(self, name: str, value) -> np.ndarray:
        self._check_new(name)
        arr = np.array(value, dtype=DTYPE)
        self.buffers[name] = arr
        return arr

    def get_or_create(self, name: str, init) -> Tensor:
        if name not in self.params:
            self.add(name, init())
        return self.params[name]

    def conv(self, name: str, cin: int, cout: int, k: int, bias: bool = True,
             transposed: bool = False, std: float | None = None) -> tuple[Tensor, Tensor | None]:
        """He-uniform kernel (or zero-mean normal with ``std``) and zero bias,
        created on first use."""

        def kernel():
            if std is not None:
                shape = (cin, cout, k, k) if transposed else (cout, cin, k, k)
                return self.rng.normal(0.0, std, size=shape)
            fan_in = cin * k * k
            limit = np.sqrt(6.0 / fan_in)
            shape = (cin, cout, k, k) if transposed else (cout, cin, k, k)
            return self.rng.uniform(-limit, limit, size=shape)

        w = self.get_or_create(f"{name}.weight", kernel)
        b = self.get_or_create(f"{name}.bias", lambda: np.zeros(cout)) if bias else None
        return w, b

    def dense(self, name: str, din: int, dout: int) -> tuple[Tensor, Tensor]:
        limit = np.sqrt(6.0 / din)
        w = self.get_or_create(f"{name}.weight", lambda: self.rng.uniform(-limit, limit, (dout, din)))
        b = self.get_or_create(f"{name}.bias", lambda: np.zeros(dout))
        return w, b

    def norm(self, name: str, c: int):
        gamma = self.get_or_create(f"{name}.scale", lambda: np.ones(c))
        beta = self.get_or_create(f"{name}.shift", lambda: np.zeros(c))
        if f"{name}.running_mean" not in self.buffers:
            self.add_buffer(f"{name}.running_mean", np.zeros(c))
            self.add_buffer(f"{name}.running_var", np.ones(c))
        return gamma, beta, self.buffers[f"{name}.running_mean"], self.buffers[f"{name}.running_var"]

    def group(self, k: int) -> dict[str, Tensor]:
        return {n: t for n, t in self.params.items() if phase_of(n) == k}

    def phases(self) -> list[int]:
        return sorted({p for p in map(phase_of, self.params) if p is not None})

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = np.zeros_like(t.data)

    def state(self) -> dict[str, np.ndarray]:
        out = {n: t.data for n, t in self.params.items()}
        out.update(self.buffers)
        return out

    def copy_state(self) -> dict[str, np.ndarray]:
        return {n: v.copy() for n, v in self.state().items()}

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        for name, value in state.items():
            if name in self.params:
                target = self.params[name].data
            elif name in self.buffers:
                target = self.buffers[name]
            elif strict:
                raise KeyError(f"checkpoint holds unknown tensor {name!r}")
            else:
                continue
            if target.shape != value.shape:
                raise ValueError(f"shape mismatch for {name!r}: {target.shape} vs {value.shape}")
            target[...] = value

    def save(self, path) -> None:
        save_checkpoint(path, self.state())


class SGD:
    """Momentum SGD: ``v <- momentum * v + grad``; ``p <- p - lr * v``."""

    def __init__(self, params: ParamStore | dict[str, Tensor], lr: float, momentum: float = 0.9):
        self.params = params.params if isinstance(params, ParamStore) else params
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, names=None) -> None:
        for name in names if names is not None else self.params:
            p = self.params[name]
            if p.grad is None:
                raise ValueError(f"parameter {name!r} has no gradient; run backward first")
            v = self.velocity.get(name)
            if v is None:
                v = self.velocity[name] = np.zeros_like(p.data)
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v


def sgd_step(params: ParamStore, lr: float, momentum: float, velocity: dict | None = None) -> dict:
    """One functional SGD step; returns the velocity dict to pass to the next call."""
    opt = SGD(params, lr, momentum)
    if velocity is not None:
        opt.velocity = velocity
    opt.step()
    return opt.velocity


def save_checkpoint(path, state: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(state))]
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        dims = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        size = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(dims)
        pos += 8 * size
        out[name] = arr.astype(DTYPE)
    if pos != len(buf):
        raise ValueError(f"{path}: {len(buf) - pos} trailing bytes")
    return out
