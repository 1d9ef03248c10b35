"""Cross-modal part/diagram alignment and order prediction.

Conventions used throughout the package:

* parts and steps are 0-based;
* a permutation matrix ``P`` has parts on rows and steps on columns, so
  ``P[i, j] == 1`` means part ``i`` is attached at step ``j``;
* an order ``sigma`` lists, for every step ``j``, the part attached there.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import kernels
from . import nn
from . import tensor as T
from .tensor import ShapeError, Tensor

DEFAULT_DIM = 64
DEFAULT_PATCH = 8
DEFAULT_TAU = 0.07


# --------------------------------------------------------------------------
# permutations


def perm_from_order(sigma) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=np.int64)
    n = len(sigma)
    if sorted(sigma.tolist()) != list(range(n)):
        raise ValueError(f"not a permutation of 0..{n - 1}: {sigma.tolist()}")
    p = np.zeros((n, n), dtype=np.int64)
    p[sigma, np.arange(n)] = 1
    return p


def check_permutation_matrix(p) -> np.ndarray:
    p = np.asarray(p)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise ValueError(f"permutation matrix must be square, got shape {p.shape}")
    if not np.all((p == 0) | (p == 1)):
        raise ValueError("permutation matrix entries must be 0 or 1")
    if not (np.all(p.sum(axis=0) == 1) and np.all(p.sum(axis=1) == 1)):
        raise ValueError("every row and column of a permutation matrix must sum to 1")
    return p.astype(np.int64)


def order_from_perm(p) -> np.ndarray:
    """Column-wise argmax: the part attached at each step."""
    return check_permutation_matrix(p).argmax(axis=0)


# --------------------------------------------------------------------------
# assignment


def hungarian(cost) -> np.ndarray:
    """Minimum-cost permutation matrix.

    Among several optimal assignments the one whose row-to-column vector is
    lexicographically smallest is returned.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"cost must be a square matrix, got shape {cost.shape}")
    if np.isnan(cost).any():
        raise ValueError("cost matrix contains NaN")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix contains infinite entries")
    n = cost.shape[0]
    p = np.zeros((n, n), dtype=np.int64)
    if n:
        p[np.arange(n), kernels.lsa(np.ascontiguousarray(cost))] = 1
    return p


def sinkhorn_normalize(s, iters: int = 50, temp: float = 1.0) -> np.ndarray:
    """``exp(S / temp)`` alternately row- and column-normalized, in log space."""
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    if temp <= 0:
        raise ValueError(f"temp must be > 0, got {temp}")
    z = np.asarray(s, dtype=np.float64) / temp
    for _ in range(iters):
        m = z.max(axis=1, keepdims=True)
        z = z - (m + np.log(np.exp(z - m).sum(axis=1, keepdims=True)))
        m = z.max(axis=0, keepdims=True)
        z = z - (m + np.log(np.exp(z - m).sum(axis=0, keepdims=True)))
    return np.exp(z)


def predict_order(s) -> tuple[np.ndarray, np.ndarray]:
    """Maximize total similarity; returns ``(P, sigma)``."""
    s = np.asarray(s, dtype=np.float64)
    p = hungarian(-s)
    return p, p.argmax(axis=0)


# --------------------------------------------------------------------------
# encoders


def patchify(rasters, patch: int) -> np.ndarray:
    """``(..., H, W)`` -> ``(..., K, patch*patch)`` in row-major patch order."""
    r = np.asarray(rasters, dtype=np.float64)
    h, w = r.shape[-2:]
    if h % patch or w % patch:
        raise ValueError(f"raster size {h}x{w} is not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    lead = r.shape[:-2]
    x = r.reshape(lead + (gh, patch, gw, patch))
    x = np.moveaxis(x, -3, -2)  # (..., gh, gw, p, p)
    return x.reshape(lead + (gh * gw, patch * patch))


def _sincos(pos: np.ndarray, dim: int, base: float = 10000.0) -> np.ndarray:
    freq = base ** (-np.arange(0, dim, 2) / dim)
    ang = pos[:, None] * freq[None, :]
    out = np.empty((len(pos), dim))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def patch_position_encoding(grid_h: int, grid_w: int, dim: int) -> np.ndarray:
    """Fixed 2-D encoding: first half of the channels codes the row, second half the column."""
    if dim % 4:
        raise ValueError(f"dim must be a multiple of 4, got {dim}")
    rows, cols = np.divmod(np.arange(grid_h * grid_w), grid_w)
    return np.concatenate([_sincos(rows.astype(float), dim // 2), _sincos(cols.astype(float), dim // 2)], axis=1)


class PartEncoder(nn.Module):
    """Shared per-point MLP (3 -> 32 -> 64), max-pool over points, linear to ``dim``."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.fc1 = nn.Linear(3, 32, rng)
        self.fc2 = nn.Linear(32, 64, rng)
        self.proj = nn.Linear(64, dim, rng)

    def __call__(self, clouds) -> Tensor:
        x = T.relu(self.fc1(T.tensor(clouds)))
        x = T.relu(self.fc2(x))
        return self.proj(T.tmax(x, axis=-2))


class DiagramEncoder(nn.Module):
    """Linear patch embedding plus a fixed patch-position code.

    Returns the per-patch features and their max over patches.
    """

    def __init__(self, dim: int, patch: int, raster_size: int, rng: np.random.Generator):
        if raster_size % patch:
            raise ValueError(f"raster size {raster_size} is not divisible by patch size {patch}")
        self.patch = patch
        self.embed = nn.Linear(patch * patch, dim, rng)
        g = raster_size // patch
        self.pos = patch_position_encoding(g, g, dim)

    @property
    def n_patches(self) -> int:
        return self.pos.shape[0]

    def __call__(self, rasters) -> tuple[Tensor, Tensor]:
        patches = patchify(rasters, self.patch)
        if patches.shape[-2] != self.n_patches:
            raise ShapeError(f"expected {self.n_patches} patches per raster, got {patches.shape[-2]}")
        tokens = self.embed(patches) + self.pos
        return tokens, T.tmax(tokens, axis=-2)


def similarity_matrix(f_parts, g_diagrams) -> Tensor:
    """``S[i, j] = f_parts[i] . g_diagrams[j]``."""
    f, g = T._lift(f_parts), T._lift(g_diagrams)
    if f.shape[-1] != g.shape[-1]:
        raise ShapeError(f"feature dims differ: {f.shape} vs {g.shape}")
    return T.matmul(f, T.swapaxes(g, -1, -2))


def order_loss(sims, tau: float = DEFAULT_TAU) -> Tensor:
    """InfoNCE over a ``B x B`` similarity matrix whose diagonal holds the positives."""
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    s = T._lift(sims)
    if s.ndim != 2 or s.shape[0] != s.shape[1] or s.shape[0] < 2:
        raise ShapeError(f"order loss needs a square similarity matrix with B >= 2, got {s.shape}")
    b = s.shape[0]
    logp = T.log_softmax(s * (1.0 / tau), axis=1)
    return -T.tsum(logp * np.eye(b)) * (1.0 / b)


def sample_pairs(samples, rng: np.random.Generator) -> list[tuple[int, int, int]]:
    """One ``(sample, part, step)`` triple per equivalence group per sample."""
    out = []
    for k, s in enumerate(samples):
        step_of = np.empty(s.n_parts, dtype=np.int64)
        step_of[s.gt_order] = np.arange(s.n_parts)
        for group in s.furniture.groups.groups:
            part = int(group[rng.integers(len(group))])
            out.append((k, part, int(step_of[part])))
    return out


@dataclass
class OrderConfig:
    dim: int = DEFAULT_DIM
    patch: int = DEFAULT_PATCH
    raster_size: int = 64
    tau: float = DEFAULT_TAU


class OrderModel(nn.Module):
    def __init__(self, config: OrderConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = config
        self.parts = PartEncoder(config.dim, rng)
        self.diagrams = DiagramEncoder(config.dim, config.patch, config.raster_size, rng)

    def batch_loss(self, samples, rng: np.random.Generator) -> Tensor:
        pairs = sample_pairs(samples, rng)
        clouds = np.stack([samples[k].furniture.parts[i] for k, i, _ in pairs])
        diffs = np.stack([samples[k].diffs[j] for k, _, j in pairs])
        _, pooled = self.diagrams(diffs)
        return order_loss(similarity_matrix(self.parts(clouds), pooled), self.config.tau)

    def similarity(self, parts, diffs) -> np.ndarray:
        with T.no_grad():
            _, pooled = self.diagrams(diffs)
            return similarity_matrix(self.parts(parts), pooled).data

    def predict(self, parts, diffs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Returns ``(S, P, sigma)`` for one sample."""
        s = self.similarity(parts, diffs)
        p, sigma = predict_order(s)
        return s, p, sigma


# --------------------------------------------------------------------------
# export


def write_matrix_csv(path, matrix) -> None:
    m = np.asarray(matrix, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["part"] + [f"step_{j}" for j in range(m.shape[1])])
        for i, row in enumerate(m):
            w.writerow([i] + [repr(float(v)) for v in row])


def write_order_csv(path, sigma, gt_order=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "part"] + ([] if gt_order is None else ["gt_part"]))
        for j, i in enumerate(sigma):
            w.writerow([j, int(i)] + ([] if gt_order is None else [int(gt_order[j])]))
