"""Assembly metrics, dataset evaluation, the order-noise sweep, and attention export."""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .alignment import OrderConfig, OrderModel, hungarian, perm_from_order, predict_order
from .assembler import PoseConfig, PoseModel, attention_by_step
from .dataset import write_pgm
from .geometry import quat_to_matrix
from .objective import match_within_groups
from .optim import load_checkpoint
from .tensor import no_grad

log = logging.getLogger(__name__)

MODES = ("predicted", "gt", "none")


@dataclass(frozen=True)
class MetricConfig:
    pa_threshold: float = 0.01
    scd_scale: float = 1e3

    def __post_init__(self):
        if self.pa_threshold <= 0:
            raise ValueError(f"pa_threshold must be > 0, got {self.pa_threshold}")


def _posed_matched(pred_q, pred_t, gt_q, gt_t, parts, matching):
    parts = np.asarray(parts, dtype=np.float64)
    mt = np.asarray(matching)
    rp = quat_to_matrix(np.asarray(pred_q, dtype=np.float64)[mt])
    rg = quat_to_matrix(np.asarray(gt_q, dtype=np.float64))
    pred = np.einsum("nmj,nij->nmi", parts, rp) + np.asarray(pred_t, dtype=np.float64)[mt][:, None, :]
    gt = np.einsum("nmj,nij->nmi", parts, rg) + np.asarray(gt_t, dtype=np.float64)[:, None, :]
    return pred, gt


def scd(pred_q, pred_t, gt_q, gt_t, parts, matching, config: MetricConfig = MetricConfig()) -> float:
    """Scaled chamfer between the predicted and true assembled shapes."""
    pred, gt = _posed_matched(pred_q, pred_t, gt_q, gt_t, parts, matching)
    return config.scd_scale * kernels.chamfer(pred.reshape(-1, 3), gt.reshape(-1, 3))


def part_chamfers(pred_q, pred_t, gt_q, gt_t, parts, matching) -> np.ndarray:
    pred, gt = _posed_matched(pred_q, pred_t, gt_q, gt_t, parts, matching)
    return np.array([kernels.chamfer(pred[i], gt[i]) for i in range(len(pred))])


def part_accuracy(pred_q, pred_t, gt_q, gt_t, parts, matching, config: MetricConfig = MetricConfig()) -> float:
    cds = part_chamfers(pred_q, pred_t, gt_q, gt_t, parts, matching)
    return int(np.count_nonzero(cds < config.pa_threshold)) / len(cds)


def success_rate(pa: float) -> int:
    if not 0.0 <= pa <= 1.0:
        raise ValueError(f"part accuracy must lie in [0, 1], got {pa}")
    return int(pa == 1.0)


def kendall_tau(pred_order, gt_order) -> float:
    """Concordant minus discordant part pairs over all pairs."""
    a, b = np.asarray(pred_order), np.asarray(gt_order)
    if a.shape != b.shape:
        raise ValueError(f"orders differ in length: {len(a)} vs {len(b)}")
    n = len(a)
    if n < 2:
        raise ValueError("Kendall tau needs at least two elements")
    ra, rb = np.empty(n, dtype=np.int64), np.empty(n, dtype=np.int64)
    ra[a] = np.arange(n)
    rb[b] = np.arange(n)
    iu = np.triu_indices(n, 1)
    s = np.sign(ra[iu[0]] - ra[iu[1]]) * np.sign(rb[iu[0]] - rb[iu[1]])
    return float(s.sum()) / (n * (n - 1) / 2)


def perturb_order_gumbel(p, noise_scale: float, seed: int) -> np.ndarray:
    """Add Gumbel(0, noise_scale) noise to ``p`` and re-solve the assignment."""
    if noise_scale < 0:
        raise ValueError(f"noise_scale must be >= 0, got {noise_scale}")
    p = np.asarray(p, dtype=np.int64)
    if noise_scale == 0:
        return p.copy()
    noise = np.random.default_rng(seed).gumbel(0.0, noise_scale, size=p.shape)
    return hungarian(-(p + noise))


# --------------------------------------------------------------------------
# models


def load_order_model(path) -> OrderModel:
    params, meta, _ = load_checkpoint(path)
    if meta.get("kind") != "order":
        raise ValueError(f"{path} is not an order checkpoint")
    model = OrderModel(OrderConfig(**meta["config"]))
    model.load_state(params)
    return model


def load_pose_model(path) -> tuple[PoseModel, dict]:
    params, meta, _ = load_checkpoint(path)
    if meta.get("kind") != "pose":
        raise ValueError(f"{path} is not a pose checkpoint")
    model = PoseModel(PoseConfig(**meta["config"]))
    model.load_state(params)
    return model, meta


# --------------------------------------------------------------------------
# evaluation


@dataclass
class SampleResult:
    id: str
    n_parts: int
    scd: float
    pa: float
    sr: int
    accurate_parts: int
    kt: float | None
    attention_hits: int
    order: list


@dataclass
class EvalReport:
    mode: str
    split: str
    count: int
    scd: float
    pa: float
    pa_per_part: float
    sr: float
    kt: float | None
    attention_hit_rate: float
    noise_scale: float = 0.0
    config: dict = field(default_factory=dict)
    samples: list = field(default_factory=list)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("samples")
        return d


def _perm_for(sample, mode, order_model):
    n = sample.n_parts
    if mode == "gt":
        return perm_from_order(sample.gt_order)
    if mode == "none":
        return np.eye(n, dtype=np.int64)
    if order_model is None:
        raise ValueError("predicted-order evaluation needs an order model")
    return predict_order(order_model.similarity(sample.furniture.parts, sample.diffs))[0]


def evaluate_sample(sample, pose_model, perm, config: MetricConfig = MetricConfig(), with_kt: bool = True):
    furn = sample.furniture
    with no_grad():
        out = pose_model(furn.parts[None], sample.diffs[None], perm[None])
    q, t = out.q.data[0], out.t.data[0]
    gq = np.array([p.q for p in furn.gt_poses])
    gt = np.array([p.t for p in furn.gt_poses])
    mt = match_within_groups(q, t, gq, gt, furn.parts, furn.groups)
    cds = part_chamfers(q, t, gq, gt, furn.parts, mt)
    accurate = int(np.count_nonzero(cds < config.pa_threshold))
    pa = accurate / len(cds)
    sigma = perm.argmax(axis=0)
    by_step = attention_by_step([a[0] for a in out.attention], sample.n_parts) if out.attention else None
    step_of = np.empty(sample.n_parts, dtype=np.int64)
    step_of[sample.gt_order] = np.arange(sample.n_parts)
    hits = int(np.count_nonzero(by_step.argmax(axis=1) == step_of)) if by_step is not None else 0
    result = SampleResult(
        sample.sample_id,
        sample.n_parts,
        scd(q, t, gq, gt, furn.parts, mt, config),
        pa,
        success_rate(pa),
        accurate,
        kendall_tau(sigma, sample.gt_order) if with_kt and sample.n_parts > 1 else None,
        hits,
        [int(i) for i in sigma],
    )
    return result, out


def evaluate_samples(
    samples,
    pose_model: PoseModel,
    order_model: OrderModel | None = None,
    mode: str = "predicted",
    config: MetricConfig = MetricConfig(),
    *,
    noise_scale: float = 0.0,
    seed: int = 0,
    workers: int = 1,
    split: str = "",
) -> EvalReport:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")

    def run(k):
        s = samples[k]
        perm = _perm_for(s, mode, order_model)
        if noise_scale:
            perm = perturb_order_gumbel(perm, noise_scale, seed * 1_000_003 + k)
        return evaluate_sample(s, pose_model, perm, config, with_kt=mode != "none" or noise_scale > 0)[0]

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, range(len(samples))))
    else:
        results = [run(k) for k in range(len(samples))]
    kts = [r.kt for r in results if r.kt is not None]
    total_parts = sum(r.n_parts for r in results)
    return EvalReport(
        mode=mode,
        split=split,
        count=len(results),
        scd=float(np.mean([r.scd for r in results])),
        pa=float(np.mean([r.pa for r in results])),
        pa_per_part=sum(r.accurate_parts for r in results) / total_parts,
        sr=float(np.mean([r.sr for r in results])),
        kt=float(np.mean(kts)) if kts else None,
        attention_hit_rate=sum(r.attention_hits for r in results) / total_parts,
        noise_scale=noise_scale,
        config=asdict(config),
        samples=[asdict(r) for r in results],
    )


def evaluate_dataset(
    pose_checkpoint,
    dataset,
    split: str = "test",
    mode: str = "predicted",
    order_checkpoint=None,
    config: MetricConfig = MetricConfig(),
    workers: int = 1,
) -> EvalReport:
    from .dataset import load_dataset

    pose_model, _ = load_pose_model(pose_checkpoint)
    order_model = load_order_model(order_checkpoint) if mode == "predicted" else None
    if mode == "predicted" and order_checkpoint is None:
        raise ValueError("predicted-order evaluation needs an order checkpoint")
    samples = load_dataset(dataset, split)
    if not samples:
        raise ValueError(f"split {split!r} of {dataset} is empty")
    return evaluate_samples(samples, pose_model, order_model, mode, config, workers=workers, split=split)


def write_report(report: EvalReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(asdict(report), indent=1, sort_keys=True))
    fields = ["id", "n_parts", "scd", "pa", "sr", "accurate_parts", "kt", "attention_hits"]
    with open(out / "per_sample.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for r in report.samples:
            w.writerow(["" if r[f] is None else r[f] for f in fields])


def kt_sweep(samples, pose_model, order_model, scales, seeds: int = 1, config: MetricConfig = MetricConfig()) -> list:
    """Rows of ``(noise_scale, mean KT, mean PA)`` under Gumbel-perturbed predicted orders."""
    rows = []
    for scale in scales:
        kts, pas = [], []
        for seed in range(seeds):
            rep = evaluate_samples(samples, pose_model, order_model, "predicted", config, noise_scale=scale, seed=seed)
            kts.append(rep.kt)
            pas.append(rep.pa)
        rows.append({"noise_scale": float(scale), "kt": float(np.mean(kts)), "pa": float(np.mean(pas))})
    return rows


def write_sweep_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["noise_scale", "kt", "pa"])
        for r in rows:
            w.writerow([repr(r["noise_scale"]), repr(r["kt"]), repr(r["pa"])])


def attention_rasters(attention, n_parts: int, grid: int) -> np.ndarray:
    """Per part, layer-averaged cross-attention laid out as the step diagrams side by side.

    Returns ``(N, grid, N * grid)`` scaled so each raster's maximum is 1.
    """
    a = np.mean(np.stack(attention), axis=0)  # (N, N*K)
    a = a.reshape(n_parts, n_parts, grid, grid).transpose(0, 2, 1, 3).reshape(n_parts, grid, n_parts * grid)
    peak = a.max(axis=(1, 2), keepdims=True)
    return a / np.where(peak > 0, peak, 1.0)


def export_attention(sample, pose_model, perm, out_dir) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _, pred = evaluate_sample(sample, pose_model, perm)
    grid = sample.diffs.shape[-1] // pose_model.config.patch
    rasters = attention_rasters([a[0] for a in pred.attention], sample.n_parts, grid)
    paths = []
    for i, r in enumerate(rasters):
        p = out / f"part_{i:02d}.pgm"
        write_pgm(p, r)
        paths.append(p)
    return paths
