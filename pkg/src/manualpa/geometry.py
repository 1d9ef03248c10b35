"""Point clouds, rigid poses and the small amount of geometry everything else needs.

A point cloud is a plain ``(m, 3)`` float64 array. Part indices are 0-based
throughout the package.
"""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import kernels

POSE_TOL = 1e-9
_PCLD_MAGIC = b"PCLD"
_PCLD_VERSION = 1


class InvalidPoseError(ValueError):
    pass


class DegenerateCloudWarning(UserWarning):
    pass


def as_cloud(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"point cloud must have shape (m, 3), got {pts.shape}")
    if len(pts) == 0:
        raise ValueError("point cloud is empty")
    if not np.all(np.isfinite(pts)):
        raise ValueError("point cloud has non-finite coordinates")
    return pts


# --------------------------------------------------------------------------
# quaternions


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion ``(w, x, y, z)``; works on stacks ``(..., 4)``."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return r.reshape(q.shape[:-1] + (3, 3))


def matrix_to_quat(r) -> np.ndarray:
    """Unit quaternion with ``w >= 0`` for a proper rotation matrix."""
    r = np.asarray(r, dtype=np.float64)
    tr = np.trace(r)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s])
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = 2.0 * np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
        q = np.array([(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s])
    elif r[1, 1] > r[2, 2]:
        s = 2.0 * np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
        q = np.array([(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
        q = np.array([(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s])
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def axis_angle_quat(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    q = np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])
    return -q if q[0] < 0 else q


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``x -> R(q) x + t``."""

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64).reshape(4)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, r, t) -> "Pose":
        return cls(matrix_to_quat(r), t)

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def check(self) -> None:
        norm = float(np.linalg.norm(self.q))
        if not np.isfinite(norm) or abs(norm - 1.0) > POSE_TOL:
            raise InvalidPoseError(f"quaternion norm is {norm!r}, expected 1 within {POSE_TOL}")

    def canonical(self) -> "Pose":
        """Same transform with the ``w >= 0`` quaternion representative."""
        return Pose(-self.q, self.t) if self.q[0] < 0 else self

    def inverse(self) -> "Pose":
        qi = self.q * np.array([1.0, -1.0, -1.0, -1.0])
        return Pose(qi, -(quat_to_matrix(qi) @ self.t))

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        return Pose.from_matrix(self.rotation @ other.rotation, self.rotation @ other.t + self.t)


def apply_pose(cloud, pose: Pose) -> np.ndarray:
    pose.check()
    pts = as_cloud(cloud)
    return pts @ pose.rotation.T + pose.t


# --------------------------------------------------------------------------
# chamfer, sampling, boxes


def chamfer_distance(a, b) -> float:
    """Sum of the two mean squared nearest-neighbour distances."""
    a = np.ascontiguousarray(as_cloud(a))
    b = np.ascontiguousarray(as_cloud(b))
    return float(kernels.chamfer(a, b))


def farthest_point_indices(cloud, m: int) -> np.ndarray:
    pts = np.ascontiguousarray(as_cloud(cloud))
    if not 1 <= m <= len(pts):
        raise ValueError(f"cannot sample {m} points from a cloud of {len(pts)}")
    return kernels.fps(pts, int(m))


def farthest_point_sample(cloud, m: int) -> np.ndarray:
    """Greedy max-min subset, seeded at index 0, ties to the lowest index."""
    pts = as_cloud(cloud)
    return pts[farthest_point_indices(pts, m)]


@dataclass(frozen=True)
class AABB:
    min: np.ndarray
    max: np.ndarray

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.max - self.min))

    @property
    def center(self) -> np.ndarray:
        return (self.min + self.max) / 2

    def contains(self, points, tol: float = 0.0) -> bool:
        pts = np.asarray(points)
        return bool(np.all(pts >= self.min - tol) and np.all(pts <= self.max + tol))


def aabb(cloud) -> AABB:
    pts = as_cloud(cloud)
    return AABB(pts.min(axis=0), pts.max(axis=0))


class Canonicalization(NamedTuple):
    """``cloud`` is the canonical cloud; ``pose`` maps ``cloud / scale`` back to the input."""

    cloud: np.ndarray
    pose: Pose
    scale: float


def pca_canonicalize(cloud, normalize: bool = True) -> Canonicalization:
    """Center, rotate principal axes onto x, y, z (descending variance), optionally scale.

    The first two axes are signed so that the coordinate of largest magnitude along
    them is positive; the third is their cross product, keeping the frame a proper
    rotation. With ``normalize`` the AABB diagonal of the result is 1.
    """
    pts = as_cloud(cloud)
    center = pts.mean(axis=0)
    x = pts - center
    cov = x.T @ x / len(x)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    if len(pts) < 3 or evals[2] <= 1e-12 * max(evals[0], 1e-300):
        warnings.warn(
            "covariance is rank deficient; falling back to axis-aligned ordering",
            DegenerateCloudWarning,
            stacklevel=2,
        )
        var = x.var(axis=0)
        perm = np.argsort(-var, kind="stable")
        basis = np.eye(3)[:, perm]
    else:
        basis = evecs[:, order]
    for k in range(2):
        coords = x @ basis[:, k]
        if coords[np.argmax(np.abs(coords))] < 0:
            basis[:, k] = -basis[:, k]
    basis[:, 2] = np.cross(basis[:, 0], basis[:, 1])
    canon = x @ basis
    scale = 1.0
    if normalize:
        diag = float(np.linalg.norm(canon.max(axis=0) - canon.min(axis=0)))
        if diag > 0:
            scale = 1.0 / diag
        canon = canon * scale
    return Canonicalization(canon, Pose.from_matrix(basis, center), scale)


@dataclass(frozen=True)
class EquivalenceGroups:
    groups: tuple

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(tuple(int(i) for i in g) for g in self.groups))
        flat = sorted(i for g in self.groups for i in g)
        if any(len(g) == 0 for g in self.groups) or flat != list(range(len(flat))):
            raise ValueError(f"not a partition of 0..N-1: {self.groups}")

    @property
    def n_parts(self) -> int:
        return sum(len(g) for g in self.groups)

    def labels(self) -> np.ndarray:
        out = np.empty(self.n_parts, dtype=np.int64)
        for k, g in enumerate(self.groups):
            out[list(g)] = k
        return out

    @classmethod
    def singletons(cls, n: int) -> "EquivalenceGroups":
        return cls(tuple((i,) for i in range(n)))


def group_equivalent_parts(parts: Sequence, rel_tol: float = 0.02) -> EquivalenceGroups:
    """Single-linkage grouping of parts whose AABB diagonals differ by at most ``rel_tol``.

    Diagonals are measured after PCA canonicalization, so the result does not
    depend on how each part is posed.
    """
    if rel_tol < 0:
        raise ValueError("rel_tol must be non-negative")
    diags = np.array([aabb(pca_canonicalize(p, normalize=False).cloud).diagonal for p in parts])
    order = np.argsort(diags, kind="stable")
    label = np.empty(len(parts), dtype=np.int64)
    cur = 0
    for k, i in enumerate(order):
        if k > 0:
            prev = diags[order[k - 1]]
            if diags[i] - prev > rel_tol * max(diags[i], prev):
                cur += 1
        label[i] = cur
    groups: dict[int, list[int]] = {}
    for i in range(len(parts)):
        groups.setdefault(int(label[i]), []).append(i)
    return EquivalenceGroups(tuple(sorted((tuple(g) for g in groups.values()), key=lambda g: g[0])))


# --------------------------------------------------------------------------
# PCLD binary format


def encode_cloud(cloud) -> bytes:
    pts = as_cloud(cloud)
    return _PCLD_MAGIC + struct.pack("<II", _PCLD_VERSION, len(pts)) + pts.astype("<f8").tobytes()


def decode_cloud(blob: bytes) -> np.ndarray:
    if blob[:4] != _PCLD_MAGIC:
        raise ValueError("not a PCLD blob")
    version, m = struct.unpack_from("<II", blob, 4)
    if version != _PCLD_VERSION:
        raise ValueError(f"unsupported PCLD version {version}")
    data = np.frombuffer(blob, dtype="<f8", count=3 * m, offset=12)
    return data.reshape(m, 3).astype(np.float64)


def save_cloud(path, cloud) -> None:
    Path(path).write_bytes(encode_cloud(cloud))


def load_cloud(path) -> np.ndarray:
    return decode_cloud(Path(path).read_bytes())
