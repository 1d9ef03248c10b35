"""Command line entry point: ``manualpa <command> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import tomli
import tomli_w

log = logging.getLogger("manualpa")


class StageOrderError(RuntimeError):
    pass


COMMON = {"seed": 0, "workers": 0}

DEFAULTS = {
    "gen": {
        "category": "chair",
        "count": 200,
        "out": None,
        "min_parts": 2,
        "max_parts": 20,
        "raster_size": 64,
        "points_per_part": 64,
    },
    "train-order": {"dataset": None, "out": None, "epochs": 50, "lr": 3e-3, "batch": 16, "weight_decay": 1e-4, "dim": 64, "patch": 8, "tau": 0.07},
    "train-pose": {
        "dataset": None,
        "out": None,
        "order_checkpoint": None,
        "gt_order": False,
        "no_order": False,
        "epochs": 100,
        "lr": 1e-3,
        "batch": 16,
        "weight_decay": 1e-4,
        "dim": 64,
        "heads": 4,
        "ffn": 128,
        "layers": 6,
        "patch": 8,
        "tau_p": 10000.0,
        "lambda_t": 1.0,
        "lambda_c": 20.0,
        "lambda_e": 1.0,
        "lambda_s": 20.0,
    },
    "eval": {"dataset": None, "out": None, "checkpoint": None, "order_checkpoint": None, "mode": "predicted", "split": "test", "pa_threshold": 0.01},
    "kt-sweep": {
        "dataset": None,
        "out": None,
        "checkpoint": None,
        "order_checkpoint": None,
        "split": "test",
        "scales": [0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 16.0],
        "sweep_seeds": 3,
    },
    "export-attn": {"dataset": None, "out": None, "checkpoint": None, "order_checkpoint": None, "mode": "gt", "split": "test", "limit": 4},
}

REQUIRED = {
    "gen": ["out"],
    "train-order": ["dataset", "out"],
    "train-pose": ["dataset", "out"],
    "eval": ["dataset", "out", "checkpoint"],
    "kt-sweep": ["dataset", "out", "checkpoint"],
    "export-attn": ["dataset", "out", "checkpoint"],
}


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="manualpa", description="Manual-guided part assembly at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, defaults in DEFAULTS.items():
        p = sub.add_parser(cmd, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="TOML file of key = value pairs; flags override it")
        for key, value in {**COMMON, **defaults}.items():
            if isinstance(value, bool):
                p.add_argument(_flag(key), action="store_true")
            elif isinstance(value, list):
                p.add_argument(_flag(key), type=lambda s: [float(x) for x in s.split(",")], help="comma separated")
            elif key == "mode":
                p.add_argument(_flag(key), choices=["predicted", "gt", "none"])
            elif key == "category":
                p.add_argument(_flag(key), choices=["chair", "table"])
            else:
                kind = type(value) if value is not None else str
                p.add_argument(_flag(key), type=kind)
    return parser


def resolve_config(command: str, args: dict) -> dict:
    """Defaults, then the config file, then explicit flags."""
    merged = {**COMMON, **DEFAULTS[command]}
    path = args.pop("config", None)
    if path:
        with open(path, "rb") as fh:
            loaded = {k.replace("-", "_"): v for k, v in tomli.load(fh).items()}
        unknown = sorted(set(loaded) - set(merged))
        if unknown:
            raise ValueError(f"unknown keys in {path}: {', '.join(unknown)}")
        merged.update(loaded)
    merged.update(args)
    missing = [_flag(k) for k in REQUIRED[command] if merged.get(k) is None]
    if missing:
        raise ValueError(f"{command} requires {', '.join(missing)}")
    merged["command"] = command
    return merged


def echo_config(cfg: dict, out) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    clean = {k: v for k, v in cfg.items() if v is not None}
    (out / "config.toml").write_text(tomli_w.dumps(clean))


def _workers(cfg) -> int:
    return cfg["workers"] or os.cpu_count() or 1


# --------------------------------------------------------------------------
# commands


def cmd_gen(cfg):
    from .dataset import build_dataset

    echo_config(cfg, cfg["out"])
    m = build_dataset(
        cfg["out"],
        cfg["category"],
        cfg["count"],
        cfg["seed"],
        raster_size=cfg["raster_size"],
        points_per_part=cfg["points_per_part"],
        min_parts=cfg["min_parts"],
        max_parts=cfg["max_parts"],
        workers=_workers(cfg),
    )
    print(f"wrote {m['count']} samples to {cfg['out']}")


def _train_split(dataset):
    from .dataset import load_dataset

    samples = load_dataset(dataset, "train")
    if not samples:
        raise ValueError(f"no training samples in {dataset}")
    return samples


def cmd_train_order(cfg):
    from .alignment import OrderConfig
    from .training import train_order

    samples = _train_split(cfg["dataset"])
    echo_config(cfg, cfg["out"])
    config = OrderConfig(cfg["dim"], cfg["patch"], samples[0].diffs.shape[-1], cfg["tau"])
    train_order(
        samples,
        epochs=cfg["epochs"],
        batch=cfg["batch"],
        lr=cfg["lr"],
        weight_decay=cfg["weight_decay"],
        seed=cfg["seed"],
        config=config,
        out_dir=cfg["out"],
    )
    print(f"order checkpoint: {Path(cfg['out']) / 'order.mpaw'}")


def cmd_train_pose(cfg):
    from .assembler import PoseConfig
    from .evaluation import load_order_model
    from .objective import LossWeights
    from .training import train_pose

    if not cfg["gt_order"] and cfg["order_checkpoint"] is None:
        raise StageOrderError(
            "pose training needs the order stage first: pass --order-checkpoint <order.mpaw> "
            "(from train-order) or --gt-order"
        )
    order_ckpt = None
    if cfg["order_checkpoint"] is not None:
        load_order_model(cfg["order_checkpoint"])  # fail early on a bad path or wrong kind
        order_ckpt = str(Path(cfg["order_checkpoint"]).resolve())
    samples = _train_split(cfg["dataset"])
    echo_config(cfg, cfg["out"])
    config = PoseConfig(cfg["dim"], cfg["heads"], cfg["ffn"], cfg["layers"], cfg["patch"], samples[0].diffs.shape[-1], cfg["tau_p"])
    weights = LossWeights(cfg["lambda_t"], cfg["lambda_c"], cfg["lambda_e"], cfg["lambda_s"])
    train_pose(
        samples,
        epochs=cfg["epochs"],
        batch=cfg["batch"],
        lr=cfg["lr"],
        weight_decay=cfg["weight_decay"],
        seed=cfg["seed"],
        config=config,
        weights=weights,
        use_order=not cfg["no_order"],
        out_dir=cfg["out"],
        meta={"order_checkpoint": order_ckpt},
    )
    print(f"pose checkpoint: {Path(cfg['out']) / 'pose.mpaw'}")


def _order_checkpoint(cfg):
    """Explicit flag first, then the path recorded when the pose model was trained."""
    from .optim import load_checkpoint

    if cfg.get("order_checkpoint"):
        return cfg["order_checkpoint"]
    _, meta, _ = load_checkpoint(cfg["checkpoint"])
    return meta.get("order_checkpoint")


def cmd_eval(cfg):
    from .evaluation import MetricConfig, evaluate_dataset, write_report

    order_ckpt = _order_checkpoint(cfg) if cfg["mode"] == "predicted" else None
    if cfg["mode"] == "predicted" and order_ckpt is None:
        raise StageOrderError("predicted-order evaluation needs --order-checkpoint")
    report = evaluate_dataset(
        cfg["checkpoint"],
        cfg["dataset"],
        cfg["split"],
        cfg["mode"],
        order_ckpt,
        MetricConfig(pa_threshold=cfg["pa_threshold"]),
        workers=_workers(cfg),
    )
    echo_config(cfg, cfg["out"])
    write_report(report, cfg["out"])
    print(json.dumps(report.summary(), indent=1, sort_keys=True))


def cmd_kt_sweep(cfg):
    from .dataset import load_dataset
    from .evaluation import kt_sweep, load_order_model, load_pose_model, write_sweep_csv

    order_ckpt = _order_checkpoint(cfg)
    if order_ckpt is None:
        raise StageOrderError("kt-sweep needs --order-checkpoint")
    pose_model, _ = load_pose_model(cfg["checkpoint"])
    order_model = load_order_model(order_ckpt)
    samples = load_dataset(cfg["dataset"], cfg["split"])
    rows = kt_sweep(samples, pose_model, order_model, cfg["scales"], cfg["sweep_seeds"])
    echo_config(cfg, cfg["out"])
    write_sweep_csv(Path(cfg["out"]) / "kt_sweep.csv", rows)
    for r in rows:
        print(f"noise {r['noise_scale']:g}: KT {r['kt']:.3f} PA {r['pa']:.3f}")


def cmd_export_attn(cfg):
    from .alignment import perm_from_order, predict_order
    from .dataset import load_dataset
    from .evaluation import export_attention, load_order_model, load_pose_model

    pose_model, _ = load_pose_model(cfg["checkpoint"])
    order_model = None
    if cfg["mode"] == "predicted":
        order_ckpt = _order_checkpoint(cfg)
        if order_ckpt is None:
            raise StageOrderError("predicted-order export needs --order-checkpoint")
        order_model = load_order_model(order_ckpt)
    samples = load_dataset(cfg["dataset"], cfg["split"])[: cfg["limit"]]
    echo_config(cfg, cfg["out"])
    for s in samples:
        if cfg["mode"] == "gt":
            perm = perm_from_order(s.gt_order)
        elif cfg["mode"] == "none":
            perm = np.eye(s.n_parts, dtype=np.int64)
        else:
            perm = predict_order(order_model.similarity(s.furniture.parts, s.diffs))[0]
        paths = export_attention(s, pose_model, perm, Path(cfg["out"]) / s.sample_id)
        print(f"{s.sample_id}: {len(paths)} rasters")


COMMANDS = {
    "gen": cmd_gen,
    "train-order": cmd_train_order,
    "train-pose": cmd_train_pose,
    "eval": cmd_eval,
    "kt-sweep": cmd_kt_sweep,
    "export-attn": cmd_export_attn,
}


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("MANUALPA_LOG", "INFO").upper(), format="%(asctime)s %(name)s %(levelname)s %(message)s"
    )
    args = vars(build_parser().parse_args(argv))
    command = args.pop("command")
    try:
        cfg = resolve_config(command, args)
        COMMANDS[command](cfg)
    except (StageOrderError, ValueError, FileNotFoundError, KeyError, OSError) as exc:
        print(f"manualpa {command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
