"""Two-stage training loops: order alignment first, then pose regression."""
from __future__ import annotations

import csv
import logging
import time
from collections import defaultdict
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .alignment import OrderConfig, OrderModel, perm_from_order
from .assembler import PoseConfig, PoseModel
from .objective import LossWeights, PoseLoss, match_within_groups, pose_loss_components
from .optim import AdamW, StepLR, save_checkpoint

log = logging.getLogger(__name__)


def _batches(samples, batch: int, rng: np.random.Generator, by_size: bool = False):
    """Shuffled mini-batches; with ``by_size`` each batch holds one part count."""
    if not by_size:
        idx = rng.permutation(len(samples))
        return [[samples[i] for i in idx[k : k + batch]] for k in range(0, len(idx), batch)]
    buckets = defaultdict(list)
    for i in rng.permutation(len(samples)):
        buckets[samples[i].n_parts].append(samples[i])
    out = []
    for n in sorted(buckets):
        b = buckets[n]
        out += [b[k : k + batch] for k in range(0, len(b), batch)]
    return [out[i] for i in rng.permutation(len(out))]


class CsvLog:
    def __init__(self, path, fields):
        self.path = Path(path)
        self.fields = fields
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", newline="") as fh:
            csv.writer(fh).writerow(fields)

    def append(self, row: dict) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([row[f] for f in self.fields])


def train_order(
    samples,
    *,
    epochs: int = 30,
    batch: int = 16,
    lr: float = 1e-3,
    weight_decay: float = 1e-4,
    seed: int = 0,
    config: OrderConfig | None = None,
    out_dir=None,
    lr_step: int = 5,
) -> OrderModel:
    config = config or OrderConfig(raster_size=samples[0].diffs.shape[-1])
    model = OrderModel(config, seed=seed)
    params = model.parameters()
    opt = AdamW(params, lr=lr, weight_decay=weight_decay)
    sched = StepLR(opt, lr_step, 0.9)
    rng = np.random.default_rng([seed, 1])
    csv_log = CsvLog(Path(out_dir) / "train_log.csv", ["epoch", "lr", "order_loss", "seconds"]) if out_dir else None
    for epoch in range(1, epochs + 1):
        t0, total, count = time.perf_counter(), 0.0, 0
        for b in _batches(samples, batch, rng):
            if len(b) < 1:
                continue
            loss = model.batch_loss(b, rng)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(b)
            count += len(b)
        row = {"epoch": epoch, "lr": opt.lr, "order_loss": total / max(count, 1), "seconds": time.perf_counter() - t0}
        log.info("order epoch %d loss %.5f lr %.3g", epoch, row["order_loss"], opt.lr)
        if csv_log:
            csv_log.append(row)
        sched.step()
    if out_dir:
        meta = {"kind": "order", "config": asdict(config), "seed": seed, "epochs": epochs}
        save_checkpoint(Path(out_dir) / "order.mpaw", params, opt, meta)
    return model


def stack_batch(samples, perms=None) -> dict:
    """Arrays for one same-size batch; ``perms`` defaults to the ground-truth order."""
    if perms is None:
        perms = [perm_from_order(s.gt_order) for s in samples]
    return {
        "parts": np.stack([s.furniture.parts for s in samples]),
        "diffs": np.stack([s.diffs for s in samples]),
        "perms": np.stack(perms),
        "gt_q": np.stack([[p.q for p in s.furniture.gt_poses] for s in samples]),
        "gt_t": np.stack([[p.t for p in s.furniture.gt_poses] for s in samples]),
    }


def pose_batch_loss(model: PoseModel, samples, weights: LossWeights, perms=None) -> PoseLoss:
    arr = stack_batch(samples, perms)
    out = model(arr["parts"], arr["diffs"], arr["perms"])
    matching = np.stack(
        [
            match_within_groups(out.q.data[k], out.t.data[k], arr["gt_q"][k], arr["gt_t"][k], arr["parts"][k], s.furniture.groups)
            for k, s in enumerate(samples)
        ]
    )
    return pose_loss_components(out.q, out.t, arr["gt_q"], arr["gt_t"], arr["parts"], matching, weights)


def train_pose(
    samples,
    *,
    epochs: int = 100,
    batch: int = 16,
    lr: float = 1e-3,
    weight_decay: float = 1e-4,
    seed: int = 0,
    config: PoseConfig | None = None,
    weights: LossWeights | None = None,
    use_order: bool = True,
    out_dir=None,
    lr_step: int = 50,
    meta: dict | None = None,
) -> PoseModel:
    """Train on ground-truth part order (identity order when ``use_order`` is false)."""
    config = config or PoseConfig(raster_size=samples[0].diffs.shape[-1])
    weights = weights or LossWeights()
    model = PoseModel(config, seed=seed)
    params = model.parameters()
    opt = AdamW(params, lr=lr, weight_decay=weight_decay)
    sched = StepLR(opt, lr_step, 0.9)
    rng = np.random.default_rng([seed, 2])
    fields = ["epoch", "lr", "L_T", "L_C", "L_E", "L_S", "L_pose", "seconds"]
    csv_log = CsvLog(Path(out_dir) / "train_log.csv", fields) if out_dir else None
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        sums, count = defaultdict(float), 0
        for b in _batches(samples, batch, rng, by_size=True):
            perms = None if use_order else [np.eye(s.n_parts, dtype=np.int64) for s in b]
            loss = pose_batch_loss(model, b, weights, perms)
            opt.zero_grad()
            loss.total.backward()
            opt.step()
            for k, v in loss.values().items():
                sums[k] += v * len(b)
            count += len(b)
        row = {k: sums[k] / count for k in ("L_T", "L_C", "L_E", "L_S", "L_pose")}
        row.update(epoch=epoch, lr=opt.lr, seconds=time.perf_counter() - t0)
        log.info("pose epoch %d loss %.5f (T %.4f C %.5f E %.4f S %.5f)", epoch, row["L_pose"], row["L_T"], row["L_C"], row["L_E"], row["L_S"])
        if csv_log:
            csv_log.append(row)
        sched.step()
    if out_dir:
        info = {"kind": "pose", "config": asdict(config), "weights": asdict(weights), "seed": seed, "epochs": epochs}
        info["use_order"] = use_order
        info.update(meta or {})
        save_checkpoint(Path(out_dir) / "pose.mpaw", params, opt, info)
    return model
