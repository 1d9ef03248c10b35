"""Procedural chairs and tables with step-by-step silhouette manuals.

Furniture is assembled in an upright template frame (z up, the front of the
piece facing -y), then centered on its AABB center and scaled so the assembled
AABB diagonal is 1. Parts are stored PCA-canonicalized; ``gt_poses[i]`` maps
part ``i`` back into the assembled shape. Congruent parts (the legs of one
chair, say) share one sampled cloud, so their canonical clouds are identical.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull

from . import kernels
from .geometry import (
    EquivalenceGroups,
    Pose,
    apply_pose,
    farthest_point_sample,
    group_equivalent_parts,
    pca_canonicalize,
)

CATEGORIES = ("chair", "table")
MAX_YAW_DEG = 45.0
MAX_PARTS = 20
BACKGROUND_INK = 0.35


@dataclass(frozen=True)
class Camera:
    """Orthographic camera. ``view_dir`` points from the scene toward the camera."""

    view_dir: np.ndarray
    up: np.ndarray
    extent: float = 0.5

    def __post_init__(self):
        v = np.asarray(self.view_dir, dtype=np.float64)
        u = np.asarray(self.up, dtype=np.float64)
        object.__setattr__(self, "view_dir", v)
        object.__setattr__(self, "up", u)
        if abs(float(v @ u)) > 1e-9:
            raise ValueError("camera up vector must be orthogonal to the view direction")

    @property
    def right(self) -> np.ndarray:
        return np.cross(self.up, self.view_dir)

    def project(self, points, size: int) -> np.ndarray:
        """World points to continuous ``(x=col, y=row)`` pixel coordinates."""
        pts = np.asarray(points)
        u = pts @ self.right
        v = pts @ self.up
        col = (u / self.extent + 1.0) * 0.5 * size
        row = (1.0 - v / self.extent) * 0.5 * size
        return np.stack([col, row], axis=-1)

    def depth(self, points) -> np.ndarray:
        """Distance along the viewing axis; larger is farther from the camera."""
        return -(np.asarray(points) @ self.view_dir)


def default_camera(extent: float = 0.5) -> Camera:
    view = np.array([1.0, -1.0, 1.0]) / np.sqrt(3.0)
    forward = -view
    right = np.cross(forward, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    up = np.cross(right, forward)
    return Camera(view, up / np.linalg.norm(up), extent)


@dataclass
class Furniture:
    parts: np.ndarray  # (N, m, 3) canonical clouds
    gt_poses: list
    category: str
    groups: EquivalenceGroups
    seed: int
    hulls: list = field(default_factory=list)  # per part (k, 3) outline vertices, canonical frame

    @property
    def n_parts(self) -> int:
        return len(self.parts)

    def posed_parts(self) -> np.ndarray:
        return np.stack([apply_pose(p, pose) for p, pose in zip(self.parts, self.gt_poses)])

    def assembled(self) -> np.ndarray:
        return self.posed_parts().reshape(-1, 3)


# --------------------------------------------------------------------------
# primitives


def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0], [0, 0, 1.0]])


def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0, 0], [0, c, -s], [0, s, c]])


@dataclass
class _Spec:
    kind: str  # "box" | "cyl"
    dims: tuple  # box: full extents (x, y, z); cyl: (radius, height) along local z
    rot: np.ndarray
    center: np.ndarray
    key: str


def _box(dims, center, key, rot=None):
    return _Spec("box", tuple(float(d) for d in dims), np.eye(3) if rot is None else rot, np.asarray(center, float), key)


def _cyl(radius, height, center, key, rot=None):
    return _Spec("cyl", (float(radius), float(height)), np.eye(3) if rot is None else rot, np.asarray(center, float), key)


def _sample_surface(spec: _Spec, n: int, rng: np.random.Generator) -> np.ndarray:
    if spec.kind == "box":
        half = np.asarray(spec.dims) / 2
        areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]] * 2) * 4
        face = rng.choice(6, size=n, p=areas / areas.sum())
        pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
        axis = face % 3
        sign = np.where(face < 3, 1.0, -1.0)
        pts[np.arange(n), axis] = sign * half[axis]
        return pts
    r, h = spec.dims
    side, cap = 2 * np.pi * r * h, np.pi * r * r
    which = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0, 2 * np.pi, size=n)
    rad = np.where(which == 0, r, r * np.sqrt(rng.uniform(0, 1, size=n)))
    z = np.where(which == 0, rng.uniform(-h / 2, h / 2, size=n), np.where(which == 1, h / 2, -h / 2))
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)


def _outline(spec: _Spec) -> np.ndarray:
    if spec.kind == "box":
        half = np.asarray(spec.dims) / 2
        corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], float)
        return corners * half
    r, h = spec.dims
    theta = np.linspace(0, 2 * np.pi, 24, endpoint=False)
    ring = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    return np.concatenate(
        [np.column_stack([ring, np.full(24, h / 2)]), np.column_stack([ring, np.full(24, -h / 2)])]
    )


# --------------------------------------------------------------------------
# templates (units roughly metres before normalization)


def _chair(rng: np.random.Generator) -> list:
    w, d = rng.uniform(0.40, 0.56), rng.uniform(0.38, 0.52)
    h, ts = rng.uniform(0.40, 0.50), rng.uniform(0.03, 0.06)
    n_legs = 3 if rng.random() < 0.15 else 4
    round_legs = rng.random() < 0.4
    s = rng.uniform(0.025, 0.045)
    inset = rng.uniform(0.01, 0.04)
    hb = rng.uniform(0.30, 0.48)
    posts = n_legs == 4 and rng.random() < 0.6
    xl, yl = w / 2 - inset - s / 2, d / 2 - inset - s / 2
    leg_len = h - ts

    def leg(x, y, length, key):
        c = (x, y, length / 2)
        return _cyl(s / 2, length, c, key) if round_legs else _box((s, s, length), c, key)

    specs = [_box((w, d, ts), (0, 0, h - ts / 2), "seat")]
    if n_legs == 3:
        stub = leg_len + ts + rng.uniform(0.06, 0.14)
        specs += [leg(-xl, -yl, leg_len, "leg"), leg(xl, -yl, leg_len, "leg"), leg(0, yl, stub, "post")]
    elif posts:
        post_len = h + hb
        specs += [leg(-xl, -yl, leg_len, "leg"), leg(xl, -yl, leg_len, "leg")]
        specs += [leg(-xl, yl, post_len, "post"), leg(xl, yl, post_len, "post")]
    else:
        # back legs rise above the seat to carry the panel, so they differ from the front pair
        stub = leg_len + ts + rng.uniform(0.06, 0.14)
        specs += [leg(-xl, -yl, leg_len, "leg"), leg(xl, -yl, leg_len, "leg")]
        specs += [leg(-xl, yl, stub, "post"), leg(xl, yl, stub, "post")]

    if posts:
        rail_h, rail_t = rng.uniform(0.05, 0.09), rng.uniform(0.02, 0.03)
        span = 2 * xl - s
        specs.append(_box((span, rail_t, rail_h), (0, yl, h + hb - rail_h / 2), "rail"))
        k = int(rng.integers(0, 5))
        if k:
            slat_w = rng.uniform(0.02, min(0.05, 0.8 * span / k))
            slat_h = hb - rail_h
            xs = np.linspace(-span / 2, span / 2, k + 2)[1:-1]
            # slats taper away from the centre; only mirror pairs stay congruent
            taper = rng.uniform(0.2, 0.4)
            specs += [
                _box((slat_w * (1 - taper * abs(x) / span), rail_t * 0.8, slat_h), (x, yl, h + slat_h / 2), "slat")
                for x in xs
            ]
    else:
        tb = rng.uniform(0.02, 0.035)
        theta = np.deg2rad(rng.uniform(0.0, 12.0))
        rot = _rot_x(-theta)
        bw = w * rng.uniform(0.85, 1.0)
        base = np.array([0.0, d / 2 - tb / 2, h])
        specs.append(_box((bw, tb, hb), base + rot @ np.array([0, 0, hb / 2]), "panel", rot))

    n_str = 0 if n_legs == 3 else int(rng.integers(0, 3))
    if n_str:
        z = leg_len * rng.uniform(0.2, 0.4)
        t = rng.uniform(0.015, 0.03)
        if n_str == 1:
            specs.append(_box((2 * xl - s, t, t), (0, -yl, z), "stretcher"))
        else:
            specs += [_box((t, 2 * yl - s, t), (x, 0, z), "stretcher") for x in (-xl, xl)]
    return specs


def _table(rng: np.random.Generator) -> list:
    h, tt = rng.uniform(0.65, 0.78), rng.uniform(0.025, 0.05)
    round_top = rng.random() < 0.25
    round_legs = rng.random() < 0.4
    s = rng.uniform(0.035, 0.06)
    leg_len = h - tt

    def leg(x, y):
        c = (x, y, leg_len / 2)
        return _cyl(s / 2, leg_len, c, "leg") if round_legs else _box((s, s, leg_len), c, "leg")

    if round_top:
        r = rng.uniform(0.35, 0.55)
        specs = [_cyl(r, tt, (0, 0, h - tt / 2), "top")]
        n_legs = int(rng.integers(3, 5))
        ang = np.pi / 4 + 2 * np.pi * np.arange(n_legs) / n_legs
        rl = r * rng.uniform(0.55, 0.75)
        specs += [leg(rl * np.cos(a), rl * np.sin(a)) for a in ang]
        return specs
    w, d = rng.uniform(0.7, 1.2), rng.uniform(0.5, 0.8)
    inset = rng.uniform(0.02, 0.08)
    xl, yl = w / 2 - inset - s / 2, d / 2 - inset - s / 2
    specs = [_box((w, d, tt), (0, 0, h - tt / 2), "top")]
    specs += [leg(x, y) for x in (-xl, xl) for y in (-yl, yl)]
    n_str = int(rng.integers(0, 3))
    if n_str:
        ah, at = rng.uniform(0.06, 0.10), rng.uniform(0.015, 0.025)
        if n_str == 1:
            z = leg_len * rng.uniform(0.15, 0.3)
            specs.append(_box((2 * xl - s, at, at * 2), (0, 0, z), "stretcher"))
        else:
            z = leg_len - ah / 2
            specs += [_box((2 * xl - s, at, ah), (0, y, z), "apron") for y in (-yl, yl)]
    return specs


def generate_furniture(
    category: str,
    seed: int,
    points_per_part: int = 64,
    surface_samples: int = 512,
    rel_tol: float = 0.02,
    max_yaw_deg: float = MAX_YAW_DEG,
) -> Furniture:
    """Deterministic furniture for ``(category, seed)``.

    The piece is turned about the vertical by a random yaw in
    ``[-max_yaw_deg, max_yaw_deg]`` before normalisation, so its orientation
    relative to the fixed camera varies and is only visible in the diagrams.
    """
    if category not in CATEGORIES:
        raise ValueError(f"unknown category {category!r}; expected one of {CATEGORIES}")
    rng = np.random.default_rng(seed)
    specs = (_chair if category == "chair" else _table)(rng)

    shapes = {}
    for spec in specs:
        sig = (spec.kind, spec.dims)
        if sig in shapes:
            continue
        local = farthest_point_sample(_sample_surface(spec, surface_samples, rng), points_per_part)
        canon, pca_pose, _ = pca_canonicalize(local, normalize=False)
        basis = pca_pose.rotation
        shapes[sig] = (canon, basis, pca_pose.t, (_outline(spec) - pca_pose.t) @ basis)

    yaw = _rot_z(np.deg2rad(rng.uniform(-max_yaw_deg, max_yaw_deg)))
    clouds, rots, trans, hulls = [], [], [], []
    for spec in specs:
        canon, basis, c, hull = shapes[(spec.kind, spec.dims)]
        clouds.append(canon)
        rots.append(yaw @ spec.rot @ basis)
        trans.append(yaw @ (spec.rot @ c + spec.center))
        hulls.append(hull)

    world = np.concatenate([cl @ r.T + t for cl, r, t in zip(clouds, rots, trans)])
    lo, hi = world.min(axis=0), world.max(axis=0)
    center, diag = (lo + hi) / 2, float(np.linalg.norm(hi - lo))

    perm = rng.permutation(len(specs))
    parts = np.stack([clouds[k] / diag for k in perm])
    poses = [Pose.from_matrix(rots[k], (trans[k] - center) / diag) for k in perm]
    hulls = [hulls[k] / diag for k in perm]
    groups = group_equivalent_parts(list(parts), rel_tol)
    return Furniture(parts, poses, category, groups, int(seed), hulls)


# --------------------------------------------------------------------------
# assembly order and rendering


def ground_truth_order(furniture: Furniture, camera: Camera) -> np.ndarray:
    """Groups bottom-up by lowest z; inside a group the farthest part from the camera first.

    Returns ``sigma`` with ``sigma[j]`` the part placed at step ``j``.
    """
    posed = furniture.posed_parts()
    min_z = np.round(posed[:, :, 2].min(axis=1), 9)
    depth = np.round(camera.depth(posed.mean(axis=1)), 9)
    groups = sorted(furniture.groups.groups, key=lambda g: (min(min_z[i] for i in g), min(g)))
    order = []
    for g in groups:
        order += sorted(g, key=lambda i: (-depth[i], i))
    return np.array(order, dtype=np.int64)


def _edges(cov: np.ndarray) -> np.ndarray:
    e = np.zeros_like(cov)
    gx = np.abs(np.diff(cov, axis=-1))
    gy = np.abs(np.diff(cov, axis=-2))
    e[..., :, :-1] = gx
    e[..., :-1, :] = np.maximum(e[..., :-1, :], gy)
    return np.minimum(e, 1.0)


def part_coverage(furniture: Furniture, camera: Camera, size: int = 64, supersample: int = 2) -> np.ndarray:
    """Anti-aliased silhouette coverage of every posed part, ``(N, size, size)``."""
    polys = []
    for hull, pose in zip(furniture.hulls, furniture.gt_poses):
        xy = camera.project(apply_pose(hull, pose), size)
        ch = ConvexHull(xy)
        v = xy[ch.vertices]
        area = np.sum(v[:, 0] * np.roll(v[:, 1], -1) - np.roll(v[:, 0], -1) * v[:, 1])
        polys.append(v if area > 0 else v[::-1])
    vmax = max(len(p) for p in polys)
    arr = np.zeros((len(polys), vmax, 2))
    counts = np.zeros(len(polys), dtype=np.int64)
    for k, p in enumerate(polys):
        arr[k, : len(p)] = p
        counts[k] = len(p)
    return kernels.fill_convex(arr, counts, size, size, supersample)


def _compose(cov: np.ndarray) -> np.ndarray:
    if len(cov) == 0:
        return np.zeros(cov.shape[1:])
    img = np.maximum(BACKGROUND_INK * cov.max(axis=0), _edges(cov).max(axis=0))
    return np.round(img * 255.0) / 255.0


def render_manual(furniture: Furniture, camera: Camera, order, size: int = 64) -> np.ndarray:
    """All ``N`` step rasters, ``(N, size, size)``; step ``j`` shows the first ``j + 1`` parts."""
    cov = part_coverage(furniture, camera, size)[np.asarray(order)]
    return np.stack([_compose(cov[: j + 1]) for j in range(len(cov))])


def render_step(furniture: Furniture, camera: Camera, order, step: int, size: int = 64) -> np.ndarray:
    """Raster of the first ``step`` parts in ``order`` (``1 <= step <= N``).

    Ink intensity in [0, 1] (0 = blank paper), quantized to 8-bit levels.
    """
    n = furniture.n_parts
    if not 1 <= step <= n:
        raise ValueError(f"step must be in [1, {n}], got {step}")
    cov = part_coverage(furniture, camera, size)[np.asarray(order)[:step]]
    return _compose(cov)


def diff_image(steps) -> np.ndarray:
    """``|I_{j-1} - I_j|`` per step, with a blank raster before the first step."""
    steps = [np.asarray(s, dtype=np.float64) for s in steps]
    if not steps:
        raise ValueError("need at least one raster")
    shape = steps[0].shape
    for s in steps:
        if s.shape != shape:
            raise ValueError(f"raster sizes differ: {shape} vs {s.shape}")
    stack = np.stack(steps)
    prev = np.concatenate([np.zeros((1,) + shape), stack[:-1]])
    return np.abs(prev - stack)


@dataclass
class ManualSample:
    furniture: Furniture
    camera: Camera
    steps: np.ndarray  # (N, H, W)
    diffs: np.ndarray  # (N, H, W)
    gt_order: np.ndarray  # sigma, (N,)
    sample_id: str = ""
    split: str = "train"

    @property
    def n_parts(self) -> int:
        return self.furniture.n_parts


def make_sample(
    category: str,
    seed: int,
    camera: Camera | None = None,
    size: int = 64,
    points_per_part: int = 64,
    sample_id: str = "",
    split: str = "train",
) -> ManualSample:
    camera = camera or default_camera()
    furn = generate_furniture(category, seed, points_per_part=points_per_part)
    order = ground_truth_order(furn, camera)
    steps = render_manual(furn, camera, order, size)
    return ManualSample(furn, camera, steps, diff_image(steps), order, sample_id, split)
