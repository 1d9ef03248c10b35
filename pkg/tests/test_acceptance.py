"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL | detail`` line; the lines
are gathered again in the terminal summary. Criteria 6 to 8 share one trained
pipeline (about 25 minutes on one CPU core). Point ``MANUALPA_ACCEPTANCE_DIR``
at a directory to keep its outputs; stages whose outputs already exist there
are not rerun.
"""
import csv
import itertools
import json
import os
import shutil
import time
from pathlib import Path

import numpy as np
import pytest
import tomli

from manualpa import tensor as T
from manualpa.alignment import check_permutation_matrix, hungarian, order_loss, similarity_matrix
from manualpa.assembler import Decoder, PoseHead, quat_rotation
from manualpa.cli import main
from manualpa.evaluation import kendall_tau, part_accuracy, scd, success_rate
from manualpa.geometry import EquivalenceGroups, chamfer_distance
from manualpa.objective import match_within_groups, pose_loss_components
from oracles import chamfer_bruteforce, gradcheck, kendall_tau_pairs, leaf
from test_cli import digest, pipeline
from test_tensor import BINARY, UNARY

pytestmark = pytest.mark.slow

GRAD_TOL = 1e-4
CONFIGS = 20

DATA = {"category": "chair", "count": 500, "seed": 1, "min_parts": 4, "max_parts": 10}
ORDER_EPOCHS = 50
POSE_EPOCHS = 60


def unit_quats(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


# ----------------------------------------------------------------------------
# 1-5: oracles and identities


def test_criterion_1_assignment_oracle(criterion):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    mismatches = invalid = 0
    for _ in range(500):
        n = int(rng.integers(2, 8))
        c = rng.normal(size=(n, n))
        p = hungarian(c)
        try:
            check_permutation_matrix(p)
        except ValueError:
            invalid += 1
            continue
        perms = np.array(list(itertools.permutations(range(n))))
        brute = c[np.arange(n), perms].sum(axis=1).min()
        # same left-to-right summation as the enumeration
        got = c[np.arange(n), p.argmax(axis=1)].sum()
        mismatches += got != brute
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and invalid == 0 and elapsed < 10
    criterion(1, ok, f"500 matrices, {mismatches} cost mismatches, {invalid} invalid, {elapsed:.2f}s")


def test_criterion_2_chamfer_oracle(criterion):
    rng = np.random.default_rng(7)
    mismatches = asym = 0
    for _ in range(200):
        a = rng.normal(size=(int(rng.integers(1, 51)), 3))
        b = rng.normal(size=(int(rng.integers(1, 51)), 3))
        cd = chamfer_distance(a, b)
        mismatches += cd != chamfer_bruteforce(a, b)
        asym += cd != chamfer_distance(b, a) or chamfer_distance(a, a) != 0.0 or cd < 0
    criterion(2, mismatches == 0 and asym == 0, f"200 pairs, {mismatches} oracle mismatches, {asym} symmetry/zero failures")


def _grad_cases():
    for name, op in sorted(UNARY.items()):

        def unary(rng, op=op):
            x = leaf(rng, 3, 4)
            w = rng.normal(size=op(T.Tensor(x.data)).shape)
            return lambda: T.tsum(op(x) * w), [x]

        yield f"op:{name}", unary
    for name, op in sorted(BINARY.items()):

        def binary(rng, op=op):
            a, b = leaf(rng, 3, 4), leaf(rng, 3, 4)
            w = rng.normal(size=op(T.Tensor(a.data), T.Tensor(b.data)).shape)
            return lambda: T.tsum(op(a, b) * w), [a, b]

        yield f"op:{name}", binary

    def order(rng):
        f, g = leaf(rng, 5, 6), leaf(rng, 5, 6)
        return lambda: order_loss(similarity_matrix(f, g), 0.7), [f, g]

    yield "order_loss", order

    for term in ("translation", "chamfer", "pointwise", "shape"):

        def pose_term(rng, term=term):
            parts = rng.normal(scale=0.1, size=(3, 8, 3))
            q, t = unit_quats(rng, 3), rng.normal(scale=0.3, size=(3, 3))
            pq, pt = leaf(rng, 3, 4), leaf(rng, 3, 3)

            def fn():
                qn = pq / T.sqrt(T.tsum(pq * pq, axis=-1, keepdims=True))
                return getattr(pose_loss_components(qn, pt, q, t, parts, np.arange(3)), term)

            return fn, [pq, pt]

        yield f"loss:{term}", pose_term

    def decoder(rng):
        dec = Decoder(8, 2, 12, 2, rng)
        x, mem = leaf(rng, 3, 8), leaf(rng, 6, 8)
        w = rng.normal(size=(3, 8))
        layer = dec.layers[0]
        leaves = [x, mem, layer.cross_attn.k.weight, layer.self_attn.q.weight, layer.ffn.fc2.weight, layer.norm1.gain]
        return lambda: T.tsum(dec(x, mem)[0] * w), leaves

    yield "decoder", decoder

    def head(rng):
        h = PoseHead(8, rng)
        h.quat.weight.data = rng.normal(scale=0.5, size=(8, 4))
        x = leaf(rng, 3, 8)
        wq, wt = rng.normal(size=(3, 4)), rng.normal(size=(3, 3))

        def fn():
            q, t = h(x)
            return T.tsum(q * wq) + T.tsum(t * wt) + T.tsum(quat_rotation(q) * 0.3)

        return fn, [x, h.quat.weight, h.quat.bias, h.trans.weight, h.trans.bias, h.norm.shift]

    yield "pose_head", head


def test_criterion_3_gradient_suite(criterion):
    worst, failures, checks = 0.0, [], 0
    for name, build in _grad_cases():
        for config in range(CONFIGS):
            fn, leaves = build(np.random.default_rng([config, 31]))
            err = gradcheck(fn, leaves)
            checks += 1
            worst = max(worst, err)
            if not err < GRAD_TOL:
                failures.append(f"{name}#{config}")
    criterion(3, not failures, f"{checks} checks, worst relative error {worst:.2e}, failures {failures[:5]}")


def test_criterion_4_metric_identities(criterion):
    rng = np.random.default_rng(11)
    problems = []
    for k in range(50):
        n = int(rng.integers(2, 8))
        size = int(rng.integers(1, n + 1))
        groups = EquivalenceGroups((tuple(range(size)),) + tuple((i,) for i in range(size, n)))
        part = rng.normal(scale=0.1, size=(20, 3))
        parts = np.concatenate([np.stack([part] * size), rng.normal(scale=0.1, size=(n - size, 20, 3))])
        q, t = unit_quats(rng, n), rng.normal(scale=0.2, size=(n, 3))
        noise = [0.0, 0.01, 0.3][k % 3]
        pq = unit_quats(rng, n) if noise > 0.1 else q
        pt = t + rng.normal(scale=noise, size=(n, 3))
        m = match_within_groups(pq, pt, q, t, parts, groups)
        l_s = pose_loss_components(pq, pt, q, t, parts, m).shape.item()
        s = scd(pq, pt, q, t, parts, m)
        if abs(s - 1e3 * l_s) > 1e-9 * max(1.0, s):
            problems.append(f"scd {s} vs {1e3 * l_s}")
        pa = part_accuracy(pq, pt, q, t, parts, m)
        if success_rate(pa) > pa:
            problems.append(f"SR > PA at {pa}")
    for n in range(2, 11):
        if kendall_tau(np.arange(n), np.arange(n)) != 1.0 or kendall_tau(np.arange(n)[::-1], np.arange(n)) != -1.0:
            problems.append(f"identity/reversal at N={n}")
    for j in range(3):
        swap = list(range(4))
        swap[j], swap[j + 1] = swap[j + 1], swap[j]
        got, oracle = kendall_tau(swap, range(4)), kendall_tau_pairs(swap, list(range(4)))
        if got != oracle or abs(got - 2 / 3) > 1e-15:
            problems.append(f"adjacent swap {j}: {got}")
    criterion(4, not problems, f"SCD=1e3*L_S, SR<=PA, KT +-1, swap KT=2/3; problems {problems[:3]}")


def _four_leg_chair(rng):
    g = np.linspace(-0.5, 0.5, 3)
    box = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
    leg = box * [0.04, 0.04, 0.4]
    seat = box * [0.5, 0.5, 0.05]
    parts = np.stack([leg] * 4 + [seat])
    corners = [[0.2, 0.2, 0.2], [-0.2, 0.2, 0.2], [-0.2, -0.2, 0.2], [0.2, -0.2, 0.2]]
    q = np.tile([1.0, 0, 0, 0], (5, 1))
    t = np.array(corners + [[0, 0, 0.42]])
    groups = EquivalenceGroups(((0, 1, 2, 3), (4,)))
    pq = unit_quats(rng, 5) * 0.1 + q
    pq /= np.linalg.norm(pq, axis=-1, keepdims=True)
    pt = t + rng.normal(scale=0.05, size=t.shape)
    return parts, q, t, pq, pt, groups


def test_criterion_5_loss_symmetry(criterion):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(10):
        parts, q, t, pq, pt, groups = _four_leg_chair(rng)
        base = pose_loss_components(pq, pt, q, t, parts, match_within_groups(pq, pt, q, t, parts, groups)).total.item()
        for perm in itertools.permutations(range(4)):
            idx = np.array(list(perm) + [4])
            gq, gt = q[idx], t[idx]
            m = match_within_groups(pq, pt, gq, gt, parts, groups)
            worst = max(worst, abs(pose_loss_components(pq, pt, gq, gt, parts, m).total.item() - base))
    square = np.array([[1.0, 1, 0], [-1, 1, 0], [-1, -1, 0], [1, -1, 0]]) * 0.1
    quarter = np.array([[np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)]])
    sq = pose_loss_components(quarter, np.zeros((1, 3)), [[1.0, 0, 0, 0]], np.zeros((1, 3)), square[None], [0])
    l_c, l_e = sq.chamfer.item(), sq.pointwise.item()
    # cos(pi/4) is not exact in floating point, so "zero" means roundoff level
    ok = worst <= 1e-12 and l_c <= 1e-15 and l_e > 0
    criterion(5, ok, f"max L_pose change over 240 leg relabellings {worst:.1e}; square L_C={l_c:.1e}, L_E={l_e:.3f}")


# ----------------------------------------------------------------------------
# 6-8: trained desk-scale pipeline


def _run_if_missing(marker: Path, argv):
    if not marker.exists():
        assert main(argv) == 0, f"manualpa {' '.join(argv)} failed"


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    root = Path(os.environ.get("MANUALPA_ACCEPTANCE_DIR") or tmp_path_factory.mktemp("acceptance"))
    data, order, pose = root / "data", root / "order", root / "pose"
    gen = ["gen", "--out", str(data), "--count", str(DATA["count"]), "--seed", str(DATA["seed"])]
    gen += ["--category", DATA["category"], "--min-parts", str(DATA["min_parts"]), "--max-parts", str(DATA["max_parts"])]
    _run_if_missing(data / "manifest.json", gen)
    _run_if_missing(
        order / "order.mpaw",
        ["train-order", "--dataset", str(data), "--out", str(order), "--epochs", str(ORDER_EPOCHS), "--seed", "1"],
    )
    ckpt = str(order / "order.mpaw")
    _run_if_missing(
        pose / "pose.mpaw",
        ["train-pose", "--dataset", str(data), "--out", str(pose), "--epochs", str(POSE_EPOCHS), "--seed", "1", "--order-checkpoint", ckpt],
    )
    # a reused directory must hold what this suite would have produced
    for sub, key, want in [(data, "count", DATA["count"]), (order, "epochs", ORDER_EPOCHS), (pose, "epochs", POSE_EPOCHS)]:
        echoed = tomli.loads((sub / "config.toml").read_text())
        assert echoed[key] == want, f"{sub}: {key}={echoed[key]}, expected {want}"
    pose_ckpt = str(pose / "pose.mpaw")
    for mode in ("gt", "predicted", "none"):
        out = root / f"eval_{mode}"
        _run_if_missing(
            out / "report.json",
            ["eval", "--dataset", str(data), "--checkpoint", pose_ckpt, "--mode", mode, "--out", str(out), "--order-checkpoint", ckpt],
        )
    _run_if_missing(
        root / "sweep" / "kt_sweep.csv",
        ["kt-sweep", "--dataset", str(data), "--checkpoint", pose_ckpt, "--out", str(root / "sweep"), "--order-checkpoint", ckpt],
    )
    return root


def _report(root, mode):
    return json.loads((root / f"eval_{mode}" / "report.json").read_text())


def test_criterion_6_trend_reproduction(criterion, trained):
    gt, pred, none = (_report(trained, m) for m in ("gt", "predicted", "none"))
    kt = pred["kt"]
    lo, hi = min(gt["pa"], none["pa"]), max(gt["pa"], none["pa"])
    ok = kt >= 0.8 and gt["pa"] > none["pa"] and lo <= pred["pa"] <= hi
    detail = f"held-out KT {kt:.3f}; PA gt {gt['pa']:.3f} > predicted {pred['pa']:.3f} > none {none['pa']:.3f}"
    criterion(6, ok, detail)


def test_criterion_7_kt_monotonic(criterion, trained):
    with open(trained / "sweep" / "kt_sweep.csv") as fh:
        rows = [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]
    buckets = {"<0.2": [], "0.2-0.6": [], ">0.8": []}
    for r in rows:
        if r["kt"] < 0.2:
            buckets["<0.2"].append(r["pa"])
        elif 0.2 <= r["kt"] <= 0.6:
            buckets["0.2-0.6"].append(r["pa"])
        elif r["kt"] > 0.8:
            buckets[">0.8"].append(r["pa"])
    means = [float(np.mean(v)) if v else float("nan") for v in buckets.values()]
    ok = all(buckets.values()) and means[0] <= means[1] <= means[2]
    detail = ", ".join(f"KT {k}: PA {m:.3f} (n={len(v)})" for (k, v), m in zip(buckets.items(), means))
    criterion(7, ok, detail)


def test_criterion_8_attention_guidance(criterion, trained):
    rate = _report(trained, "gt")["attention_hit_rate"]
    chance = _report(trained, "gt")["count"] / sum(s["n_parts"] for s in _report(trained, "gt")["samples"])
    criterion(8, rate >= 0.6, f"{rate:.1%} of held-out parts attend most to their own step (chance about {chance:.1%})")


# ----------------------------------------------------------------------------
# 9: determinism


def test_criterion_9_determinism(criterion, tmp_path):
    subs = ("data", "order", "pose", "eval_predicted", "eval_gt", "eval_none", "sweep", "attn")
    runs = []
    for _ in range(2):
        shutil.rmtree(tmp_path / "run", ignore_errors=True)
        pipeline(tmp_path / "run")
        runs.append({sub: digest(tmp_path / "run" / sub) for sub in subs})
    differing = [s for s in subs if runs[0][s] != runs[1][s]]
    criterion(9, not differing, f"two seeded runs of gen, both trainings, eval, sweep and export; differing outputs: {differing or 'none'}")
