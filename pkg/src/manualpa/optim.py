"""AdamW with a step learning-rate schedule, and the MPAW checkpoint format."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Tensor

_MAGIC = b"MPAW"
_VERSION = 1


@dataclass
class AdamW:
    """Adam with decoupled weight decay.

    The decay is applied to the parameter before the moment update,
    ``p <- p - lr * wd * p``, so it does not flow through the moment estimates.
    """

    params: dict
    lr: float = 1e-3
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            self.m.setdefault(name, np.zeros_like(p.data))
            self.v.setdefault(name, np.zeros_like(p.data))

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                bad = int(np.size(p.grad) - np.count_nonzero(np.isfinite(p.grad)))
                raise FloatingPointError(
                    f"non-finite gradient in {name!r} (shape {p.shape}, {bad} bad entries) at step {self.step_count + 1}"
                )
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                p.data = p.data - self.lr * self.weight_decay * p.data
            m = self.m[name] = b1 * self.m[name] + (1 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


class StepLR:
    """Multiply the learning rate by ``gamma`` every ``step_size`` epochs."""

    def __init__(self, opt: AdamW, step_size: int, gamma: float = 0.9):
        self.opt = opt
        self.step_size = step_size
        self.gamma = gamma
        self.base_lr = opt.lr
        self.epoch = 0

    def step(self) -> None:
        self.epoch += 1
        self.opt.lr = self.base_lr * self.gamma ** (self.epoch // self.step_size)


def save_checkpoint(path, params: dict, opt: AdamW | None = None, meta: dict | None = None) -> None:
    """Write parameters (and optionally optimizer state) in the MPAW format.

    Layout, little endian: magic, u32 version, u32 count, then per parameter
    u32 name length, name, u32 ndim, u32 dims, float64 data. A u32-length JSON
    metadata block follows, then a u8 flag and, if set, the optimizer state
    (u64 step, five float64 hyper-parameters, first and second moments in
    parameter order).
    """
    out = bytearray(_MAGIC)
    out += struct.pack("<II", _VERSION, len(params))
    for name, p in params.items():
        data = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
        enc = name.encode()
        out += struct.pack("<I", len(enc)) + enc
        out += struct.pack("<I", data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape)
        out += data.astype("<f8").tobytes()
    blob = json.dumps(meta or {}, sort_keys=True).encode()
    out += struct.pack("<I", len(blob)) + blob
    if opt is None:
        out += b"\x00"
    else:
        out += b"\x01" + struct.pack("<Q5d", opt.step_count, opt.lr, opt.weight_decay, *opt.betas, opt.eps)
        for name in params:
            out += opt.m[name].astype("<f8").tobytes() + opt.v[name].astype("<f8").tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> tuple[dict, dict, dict | None]:
    """Return ``(params, meta, optimizer_state)``; the last is ``None`` when absent."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    buf = path.read_bytes()
    if buf[:4] != _MAGIC:
        raise ValueError(f"{path} is not an MPAW checkpoint")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos : pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    (mlen,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    meta = json.loads(buf[pos : pos + mlen].decode())
    pos += mlen
    opt_state = None
    if buf[pos] == 1:
        pos += 1
        step, lr, wd, b1, b2, eps = struct.unpack_from("<Q5d", buf, pos)
        pos += struct.calcsize("<Q5d")
        m, v = {}, {}
        for name, arr in params.items():
            for store in (m, v):
                store[name] = np.frombuffer(buf, dtype="<f8", count=arr.size, offset=pos).reshape(arr.shape).copy()
                pos += 8 * arr.size
        opt_state = {"step": step, "lr": lr, "weight_decay": wd, "betas": (b1, b2), "eps": eps, "m": m, "v": v}
    return params, meta, opt_state
