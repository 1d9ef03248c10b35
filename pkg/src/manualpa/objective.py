"""Pose losses with matching inside equivalence groups.

``matching[i]`` is the predicted part whose pose is compared against ground
truth part ``i``. It is a bijection inside each group and the identity for
singleton groups.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from . import tensor as T
from .alignment import hungarian
from .assembler import quat_rotation
from .geometry import EquivalenceGroups, quat_to_matrix
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    translation: float = 1.0  # L_T
    chamfer: float = 20.0  # L_C
    pointwise: float = 1.0  # L_E
    shape: float = 20.0  # L_S

    def __post_init__(self):
        if min(self.translation, self.chamfer, self.pointwise, self.shape) < 0:
            raise ValueError("loss weights must be non-negative")


def _posed(parts: np.ndarray, q: np.ndarray, t: np.ndarray) -> np.ndarray:
    r = quat_to_matrix(q)
    return np.einsum("nmj,nij->nmi", parts, r) + t[:, None, :]


def pairwise_posed_chamfer(pred_q, pred_t, gt_q, gt_t, parts) -> np.ndarray:
    """``C[a, b] = CD(R_hat_a P_a + t_hat_a, R_b P_b + t_b)``."""
    parts = np.asarray(parts, dtype=np.float64)
    pa = _posed(parts, np.asarray(pred_q), np.asarray(pred_t))
    pb = _posed(parts, np.asarray(gt_q), np.asarray(gt_t))
    return kernels.chamfer_cross(pa, pb)


def match_within_groups(pred_q, pred_t, gt_q, gt_t, parts, groups: EquivalenceGroups) -> np.ndarray:
    """Per group, the assignment of predictions to ground truth with least posed chamfer."""
    n = len(parts)
    matching = np.arange(n)
    for g in groups.groups:
        if len(g) < 2:
            continue
        idx = np.asarray(g)
        cost = pairwise_posed_chamfer(
            np.asarray(pred_q)[idx], np.asarray(pred_t)[idx], np.asarray(gt_q)[idx], np.asarray(gt_t)[idx], np.asarray(parts)[idx]
        )
        col_of_row = hungarian(cost).argmax(axis=1)  # prediction a -> ground truth b
        matching[idx[col_of_row]] = idx
    return matching


def matching_cost(pred_q, pred_t, gt_q, gt_t, parts, matching) -> float:
    parts = np.asarray(parts, dtype=np.float64)
    matching = np.asarray(matching)
    pa = _posed(parts, np.asarray(pred_q)[matching], np.asarray(pred_t)[matching])
    pb = _posed(parts, np.asarray(gt_q), np.asarray(gt_t))
    return float(sum(kernels.chamfer(pa[i], pb[i]) for i in range(len(parts))))


# --------------------------------------------------------------------------
# differentiable pieces


def chamfer_tensor(a: Tensor, b) -> Tensor:
    """Batched chamfer ``(G, n, 3)`` vs ``(G, k, 3)`` -> ``(G,)``; ``b`` may be a Tensor or array.

    Nearest neighbours are found without gradients; the distances to them are
    differentiable.
    """
    a, b = T._lift(a), T._lift(b)
    ia, ib = kernels.nn_index_batched(np.ascontiguousarray(a.data), np.ascontiguousarray(b.data))
    da = a - T.gather_rows(b, ia)
    db = T.gather_rows(a, ib) - b
    return T.mean(T.tsum(da * da, axis=-1), axis=-1) + T.mean(T.tsum(db * db, axis=-1), axis=-1)


def _row_norm(x: Tensor) -> Tensor:
    return T.sqrt(T.tsum(x * x, axis=-1))


@dataclass
class PoseLoss:
    translation: Tensor
    chamfer: Tensor
    pointwise: Tensor
    shape: Tensor
    total: Tensor

    def values(self) -> dict:
        return {
            "L_T": self.translation.item(),
            "L_C": self.chamfer.item(),
            "L_E": self.pointwise.item(),
            "L_S": self.shape.item(),
            "L_pose": self.total.item(),
        }


def pose_loss_components(pred_q, pred_t, gt_q, gt_t, parts, matching, weights: LossWeights | None = None) -> PoseLoss:
    """All four terms and the weighted total, averaged over the batch.

    Shapes: predictions ``(B, N, 4)`` / ``(B, N, 3)`` (Tensors or arrays),
    ground truth likewise as arrays, ``parts (B, N, m, 3)``, ``matching (B, N)``.
    Unbatched inputs (no leading ``B``) are accepted too.
    """
    weights = weights or LossWeights()
    parts = np.asarray(parts, dtype=np.float64)
    if parts.ndim == 3:
        return pose_loss_components(
            T._lift(pred_q)[None],
            T._lift(pred_t)[None],
            np.asarray(gt_q)[None],
            np.asarray(gt_t)[None],
            parts[None],
            np.asarray(matching)[None],
            weights,
        )
    pred_q, pred_t = T._lift(pred_q), T._lift(pred_t)
    matching = np.asarray(matching, dtype=np.int64)
    b, n, m, _ = parts.shape
    q_hat = T.gather_rows(pred_q, matching)
    t_hat = T.gather_rows(pred_t, matching)
    r_hat = quat_rotation(q_hat)  # (B, N, 3, 3)
    r_gt = quat_to_matrix(np.asarray(gt_q, dtype=np.float64).reshape(-1, 4)).reshape(b, n, 3, 3)
    gt_t = np.asarray(gt_t, dtype=np.float64)

    rot_pred = T.matmul(T.tensor(parts), T.swapaxes(r_hat, -1, -2))  # (B, N, m, 3)
    rot_gt = parts @ np.swapaxes(r_gt, -1, -2)

    l_t = T.mean(_row_norm(t_hat - gt_t), axis=-1)
    l_c = T.mean(chamfer_tensor(rot_pred.reshape(b * n, m, 3), rot_gt.reshape(b * n, m, 3)).reshape(b, n), axis=-1)
    l_e = T.mean(T.mean(_row_norm(rot_pred - rot_gt), axis=-1), axis=-1)
    union_pred = (rot_pred + t_hat.reshape(b, n, 1, 3)).reshape(b, n * m, 3)
    union_gt = (rot_gt + gt_t[:, :, None, :]).reshape(b, n * m, 3)
    l_s = chamfer_tensor(union_pred, union_gt)

    l_t, l_c, l_e, l_s = (T.mean(x) for x in (l_t, l_c, l_e, l_s))
    total = weights.translation * l_t + weights.chamfer * l_c + weights.pointwise * l_e + weights.shape * l_s
    return PoseLoss(l_t, l_c, l_e, l_s, total)
