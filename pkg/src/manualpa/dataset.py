"""On-disk datasets: a JSON manifest plus per-sample PCLD clouds and PGM rasters."""
from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .geometry import EquivalenceGroups, Pose, load_cloud, save_cloud
from .synthetic import MAX_PARTS, Camera, Furniture, ManualSample, default_camera, diff_image, make_sample

log = logging.getLogger(__name__)

FORMAT = "manualpa-dataset"
FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")


# --------------------------------------------------------------------------
# PGM


def write_pgm(path, raster) -> None:
    """Binary (P5) 8-bit PGM; intensities in [0, 1] are mapped to 0..255."""
    img = np.asarray(raster, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"raster must be 2-D, got shape {img.shape}")
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode()
    Path(path).write_bytes(header + data.tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        end = pos
        while not buf[end : end + 1].isspace():
            end += 1
        tokens.append(buf[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    data = np.frombuffer(buf, dtype=np.uint8, count=width * height, offset=pos + 1)
    return data.reshape(height, width).astype(np.float64) / 255.0


# --------------------------------------------------------------------------
# samples


def sample_seed(base_seed: int, k: int) -> int:
    return int(np.random.SeedSequence([base_seed, k]).generate_state(1, np.uint64)[0])


def assign_splits(n: int) -> list:
    """80/10/10 over sample ids in seed order."""
    n_train = int(round(0.8 * n))
    n_val = int(round(0.1 * n))
    return ["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val)


def _camera_json(cam: Camera) -> dict:
    return {"view_dir": cam.view_dir.tolist(), "up": cam.up.tolist(), "extent": cam.extent}


def _camera_from(d: dict) -> Camera:
    return Camera(np.array(d["view_dir"]), np.array(d["up"]), float(d["extent"]))


def save_sample(root: Path, sample: ManualSample) -> dict:
    rel = Path("samples") / sample.sample_id
    d = root / rel
    d.mkdir(parents=True, exist_ok=True)
    furn = sample.furniture
    for i in range(furn.n_parts):
        save_cloud(d / f"part_{i:02d}.pcld", furn.parts[i])
        save_cloud(d / f"hull_{i:02d}.pcld", furn.hulls[i])
    for j in range(furn.n_parts):
        write_pgm(d / f"step_{j:02d}.pgm", sample.steps[j])
        write_pgm(d / f"diff_{j:02d}.pgm", sample.diffs[j])
    meta = {
        "id": sample.sample_id,
        "category": furn.category,
        "seed": furn.seed,
        "n_parts": furn.n_parts,
        "gt_order": [int(i) for i in sample.gt_order],
        "groups": [list(g) for g in furn.groups.groups],
        "gt_poses": [{"q": p.q.tolist(), "t": p.t.tolist()} for p in furn.gt_poses],
        "camera": _camera_json(sample.camera),
    }
    (d / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1))
    return {
        "id": sample.sample_id,
        "category": furn.category,
        "n_parts": furn.n_parts,
        "seed": furn.seed,
        "split": sample.split,
        "dir": rel.as_posix(),
        "files": {
            "meta": (rel / "meta.json").as_posix(),
            "parts": [(rel / f"part_{i:02d}.pcld").as_posix() for i in range(furn.n_parts)],
            "hulls": [(rel / f"hull_{i:02d}.pcld").as_posix() for i in range(furn.n_parts)],
            "steps": [(rel / f"step_{j:02d}.pgm").as_posix() for j in range(furn.n_parts)],
            "diffs": [(rel / f"diff_{j:02d}.pgm").as_posix() for j in range(furn.n_parts)],
        },
    }


def load_sample(root: Path, entry: dict) -> ManualSample:
    root = Path(root)
    files = entry["files"]
    meta_path = root / files["meta"]
    if not meta_path.exists():
        raise FileNotFoundError(f"missing sample metadata: {meta_path}")
    meta = json.loads(meta_path.read_text())
    parts = np.stack([load_cloud(root / f) for f in files["parts"]])
    hulls = [load_cloud(root / f) for f in files.get("hulls", [])]
    poses = [Pose(np.array(p["q"]), np.array(p["t"])) for p in meta["gt_poses"]]
    furn = Furniture(
        parts, poses, meta["category"], EquivalenceGroups(tuple(tuple(g) for g in meta["groups"])), meta["seed"], hulls
    )
    steps = np.stack([read_pgm(root / f) for f in files["steps"]])
    return ManualSample(
        furn,
        _camera_from(meta["camera"]),
        steps,
        diff_image(list(steps)),
        np.array(meta["gt_order"], dtype=np.int64),
        entry["id"],
        entry["split"],
    )


def _make(args):
    category, seed, size, m, sid, split = args
    return make_sample(category, seed, default_camera(), size, m, sid, split)


def build_dataset(
    out,
    category: str,
    count: int,
    seed: int,
    *,
    raster_size: int = 64,
    points_per_part: int = 64,
    min_parts: int = 2,
    max_parts: int = MAX_PARTS,
    workers: int | None = None,
) -> dict:
    """Generate ``count`` samples whose part count lies in ``[min_parts, max_parts]``.

    Output is byte-identical for identical arguments, whatever ``workers`` is.
    """
    from .synthetic import generate_furniture

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    chosen, k = [], 0
    while len(chosen) < count:
        s = sample_seed(seed, k)
        k += 1
        n = generate_furniture(category, s, points_per_part=points_per_part).n_parts
        if min_parts <= n <= max_parts:
            chosen.append(s)
        if k > 100 * count + 1000:
            raise RuntimeError(f"could not find {count} {category}s with {min_parts}..{max_parts} parts")
    splits = assign_splits(count)
    jobs = [(category, s, raster_size, points_per_part, f"{category}-{i:06d}", splits[i]) for i, s in enumerate(chosen)]
    workers = workers or os.cpu_count() or 1
    if workers > 1 and count > 1:
        with ProcessPoolExecutor(workers) as pool:
            samples = list(pool.map(_make, jobs, chunksize=8))
    else:
        samples = [_make(j) for j in jobs]
    entries = [save_sample(out, s) for s in samples]
    manifest = {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "category": category,
        "seed": seed,
        "count": count,
        "raster_size": raster_size,
        "points_per_part": points_per_part,
        "min_parts": min_parts,
        "max_parts": max_parts,
        "camera": _camera_json(default_camera()),
        "samples": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    log.info("wrote %d samples to %s", count, out)
    return manifest


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{path}: not a {FORMAT} manifest")
    return manifest


def load_dataset(root, split: str | None = None) -> list:
    """Load every sample (or one split) into memory, in manifest order."""
    root = Path(root)
    manifest = read_manifest(root)
    return [load_sample(root, e) for e in manifest["samples"] if split is None or e["split"] == split]
