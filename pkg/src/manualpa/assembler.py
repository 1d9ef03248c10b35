"""Pose regression: order-aware positional codes, a transformer decoder, and a quaternion head."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .alignment import DEFAULT_DIM, DEFAULT_PATCH, DiagramEncoder, PartEncoder, check_permutation_matrix
from .geometry import Pose
from .tensor import ShapeError, Tensor

QUAT_EPS = 1e-8


class DegenerateQuaternionWarning(RuntimeWarning):
    pass


def sinusoidal_pe(n: int, dim: int, tau_p: float = 10000.0, positions=None) -> np.ndarray:
    """Rows for positions ``1..n`` (or the given ``positions``).

    Channel ``2i`` holds ``sin(x / tau_p**(2i/dim))`` and channel ``2i+1`` the
    matching cosine, ``i = 0 .. dim/2 - 1``.
    """
    if dim % 2:
        raise ValueError(f"positional code dimension must be even, got {dim}")
    if tau_p <= 0:
        raise ValueError(f"tau_p must be > 0, got {tau_p}")
    x = np.arange(1, n + 1, dtype=np.float64) if positions is None else np.asarray(positions, dtype=np.float64)
    ang = x[:, None] / tau_p ** (np.arange(0, dim, 2) / dim)[None, :]
    out = np.empty((len(x), dim))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def permute_pe(phi, p) -> np.ndarray:
    """Per-part codes: part ``i`` receives the row of the step it is attached at."""
    phi = np.asarray(phi, dtype=np.float64)
    p = check_permutation_matrix(p)
    if p.shape[0] != phi.shape[0]:
        raise ShapeError(f"permutation {p.shape} does not match positional code {phi.shape}")
    return p @ phi


# --------------------------------------------------------------------------
# rotations


def quat_rotation(q) -> Tensor:
    """Differentiable unit quaternion ``(w, x, y, z)`` -> rotation matrix, shape ``(..., 3, 3)``."""
    q = T._lift(q)
    w, x, y, z = (q[..., k] for k in range(4))
    rows = [
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ]
    return T.stack([T.stack(r, axis=-1) for r in rows], axis=-2)


# --------------------------------------------------------------------------
# decoder


class DecoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int, ffn: int, rng: np.random.Generator):
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = nn.MultiHeadAttention(dim, heads, rng)
        self.norm2 = nn.LayerNorm(dim)
        self.cross_attn = nn.MultiHeadAttention(dim, heads, rng)
        self.norm3 = nn.LayerNorm(dim)
        self.ffn = nn.FeedForward(dim, ffn, rng)

    def __call__(self, x: Tensor, memory: Tensor) -> tuple[Tensor, np.ndarray]:
        h = self.norm1(x)
        x = x + self.self_attn(h, h)[0]
        ctx, attn = self.cross_attn(self.norm2(x), memory)
        x = x + ctx
        return x + self.ffn(self.norm3(x)), attn


class Decoder(nn.Module):
    """Pre-norm stack; returns final part states and one cross-attention map per layer."""

    def __init__(self, dim: int, heads: int, ffn: int, layers: int, rng: np.random.Generator):
        self.layers = [DecoderLayer(dim, heads, ffn, rng) for _ in range(layers)]

    def __call__(self, x, memory) -> tuple[Tensor, list]:
        x, memory = T._lift(x), T._lift(memory)
        if x.shape[-1] != memory.shape[-1]:
            raise ShapeError(f"part states {x.shape} and diagram tokens {memory.shape} differ in width")
        maps = []
        for layer in self.layers:
            x, attn = layer(x, memory)
            maps.append(attn)
        return x, maps


class PoseHead(nn.Module):
    """Final norm, then translation and quaternion heads.

    The quaternion weights start at zero with bias ``(1, 0, 0, 0)``, so the
    initial rotation is exactly the identity.
    """

    def __init__(self, dim: int, rng: np.random.Generator):
        self.norm = nn.LayerNorm(dim)
        self.trans = nn.Linear(dim, 3, rng)
        self.trans.weight.data *= 0.1
        self.quat = nn.Linear(dim, 4, rng, zero=True)
        self.quat.bias.data = np.array([1.0, 0.0, 0.0, 0.0])

    def __call__(self, x) -> tuple[Tensor, Tensor]:
        h = self.norm(x)
        raw = self.quat(h)
        norm = T.sqrt(T.tsum(raw * raw, axis=-1, keepdims=True))
        if np.any(norm.data < QUAT_EPS):
            warnings.warn("quaternion head produced a near-zero vector; norm clamped", DegenerateQuaternionWarning)
        return raw / T.clamp_min(norm, QUAT_EPS), self.trans(h)


@dataclass
class PoseConfig:
    dim: int = DEFAULT_DIM
    heads: int = 4
    ffn: int = 128
    layers: int = 6
    patch: int = DEFAULT_PATCH
    raster_size: int = 64
    tau_p: float = 10000.0


@dataclass
class PosePrediction:
    q: Tensor  # (..., N, 4)
    t: Tensor  # (..., N, 3)
    states: Tensor  # (..., N, D)
    attention: list = field(default_factory=list)  # per layer (..., N, N*K)

    def poses(self, b: int | None = None) -> list:
        q, t = self.q.data, self.t.data
        if b is not None:
            q, t = q[b], t[b]
        return [Pose(q[i], t[i]) for i in range(len(q))]


class PoseModel(nn.Module):
    def __init__(self, config: PoseConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = config
        self.parts = PartEncoder(config.dim, rng)
        self.diagrams = DiagramEncoder(config.dim, config.patch, config.raster_size, rng)
        self.memory_norm = nn.LayerNorm(config.dim)
        self.decoder = Decoder(config.dim, config.heads, config.ffn, config.layers, rng)
        self.head = PoseHead(config.dim, rng)

    def __call__(self, parts, diffs, perms) -> PosePrediction:
        """``parts (B, N, m, 3)``, ``diffs (B, N, H, W)``, ``perms (B, N, N)``."""
        parts, diffs, perms = np.asarray(parts), np.asarray(diffs), np.asarray(perms)
        b, n = parts.shape[:2]
        phi = sinusoidal_pe(n, self.config.dim, self.config.tau_p)
        part_pe = np.stack([permute_pe(phi, p) for p in perms])
        f_parts = self.parts(parts) + part_pe
        tokens, _ = self.diagrams(diffs)  # (B, N, K, D)
        k = tokens.shape[-2]
        memory = (tokens + phi[:, None, :]).reshape(b, n * k, self.config.dim)
        states, maps = self.decoder(f_parts, self.memory_norm(memory))
        q, t = self.head(states)
        return PosePrediction(q, t, states, maps)


def attention_by_step(maps, n: int) -> np.ndarray:
    """Mean over layers of the attention mass each part puts on every step's tokens, ``(..., N, N)``."""
    a = np.mean(np.stack(maps), axis=0)
    return a.reshape(a.shape[:-1] + (n, a.shape[-1] // n)).sum(axis=-1)
