"""Bipartite matching of predictions to targets and the set-prediction loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tide.errors import DataError, DimError, NumericError
from tide.geometry import cxcywh_to_xyxy, giou_tensor, pairwise_iou
from tide.numerics import tensor as T
from tide.numerics.tensor import Tensor


@dataclass
class MatchAssignment:
    pairs: list  # (prediction_index, target_index), ordered by target
    unmatched: list  # prediction indices that fall to the null class

    def cost(self, matrix: np.ndarray) -> float:
        return float(sum(matrix[p, t] for p, t in self.pairs))


def hungarian(cost) -> MatchAssignment:
    """Exact min-cost assignment of every target (column) to a distinct
    prediction (row) for a [n_pred, n_tgt] matrix with n_tgt <= n_pred.

    Shortest augmenting paths with dual potentials, O(n_tgt^2 * n_pred).
    """
    cost = np.asarray(cost.data if isinstance(cost, Tensor) else cost, dtype=np.float64)
    if cost.ndim != 2:
        raise DimError(f"cost must be a matrix, got shape {cost.shape}")
    if not np.isfinite(cost).all():
        raise NumericError("cost matrix contains NaN or Inf")
    n_pred, n_tgt = cost.shape
    if n_tgt > n_pred:
        raise DimError(f"{n_tgt} targets cannot be matched to {n_pred} predictions")
    if n_tgt == 0:
        return MatchAssignment([], list(range(n_pred)))

    # rows of `a` are targets, columns predictions; index 0 is a sentinel
    a = cost.T
    n, m = n_tgt, n_pred
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)  # owner[j]: target row holding column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cur = a[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    pairs = sorted(((j - 1, int(owner[j]) - 1) for j in range(1, m + 1) if owner[j]), key=lambda p: p[1])
    matched = {p for p, _ in pairs}
    return MatchAssignment(pairs, [j for j in range(n_pred) if j not in matched])


def match_cost(probs: np.ndarray, boxes: np.ndarray, positions, target_boxes, lambdas=(1.0, 5.0, 2.0)) -> np.ndarray:
    """[N, n_tgt] cost: -l1 * p(target position) + l2 * L1(box) + l3 * (1 - GIoU)."""
    probs = np.asarray(probs, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.int64)
    target_boxes = np.asarray(target_boxes, dtype=np.float64).reshape(-1, 4)
    if positions.size == 0:
        raise DataError("match_cost needs at least one target")
    if positions.min() < 0 or positions.max() >= probs.shape[1]:
        raise DataError(f"target position out of range for {probs.shape[1]} support rows")
    l_cls, l_box, l_giou = lambdas
    cls = -probs[:, positions]
    l1 = np.abs(boxes[:, None, :] - target_boxes[None, :, :]).sum(-1)
    _, g = pairwise_iou(cxcywh_to_xyxy(boxes), cxcywh_to_xyxy(target_boxes), with_giou=True)
    return l_cls * cls + l_box * l1 + l_giou * (1.0 - g)


def layer_loss(log_probs: Tensor, boxes: Tensor, positions, target_boxes, null_index: int,
               assignment: MatchAssignment, lambdas=(1.0, 5.0, 2.0), null_weight: float = 1.0) -> Tensor:
    """Matched queries: cross-entropy on their target position, L1 and
    1 - GIoU on the box. Unmatched queries: cross-entropy toward null. Summed."""
    n = log_probs.shape[0]
    labels = np.full(n, null_index, dtype=np.int64)
    weights = np.full(n, float(null_weight))
    pred_idx = np.array([p for p, _ in assignment.pairs], dtype=np.int64)
    tgt_idx = np.array([t for _, t in assignment.pairs], dtype=np.int64)
    if pred_idx.size:
        labels[pred_idx] = np.asarray(positions, dtype=np.int64)[tgt_idx]
        weights[pred_idx] = 1.0
    l_cls, l_box, l_giou = lambdas
    ce = -(log_probs[np.arange(n), labels] * Tensor(weights)).sum()
    loss = ce * l_cls
    if pred_idx.size:
        pb = T.take_rows(boxes, pred_idx)
        tb = Tensor(np.asarray(target_boxes, dtype=np.float64).reshape(-1, 4)[tgt_idx])
        loss = loss + T.absolute(pb - tb).sum() * l_box + (1.0 - giou_tensor(pb, tb)).sum() * l_giou
    return loss


def total_loss(layers, positions, target_boxes, null_index: int, lambdas=(1.0, 5.0, 2.0),
               null_weight: float = 1.0, aux_loss: bool = True, assignments=None):
    """Mean over decoder layers of the matched set loss.

    `layers` is a list of (log_probs, boxes); with `aux_loss` off only the last
    layer counts. Matching is redone per layer unless `assignments` is given.
    Returns (loss, assignments).
    """
    used = layers if aux_loss else layers[-1:]
    positions = list(positions)
    target_boxes = np.asarray(target_boxes, dtype=np.float64).reshape(-1, 4)
    if assignments is None:
        assignments = []
        for log_probs, boxes in used:
            if positions:
                cost = match_cost(np.exp(log_probs.data), boxes.data, positions, target_boxes, lambdas)
                assignments.append(hungarian(cost))
            else:
                assignments.append(MatchAssignment([], list(range(log_probs.shape[0]))))
    terms = [layer_loss(lp, bx, positions, target_boxes, null_index, a, lambdas, null_weight)
             for (lp, bx), a in zip(used, assignments)]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms)), assignments


def episode_loss(detections, episode, cfg):
    """Loss of a DetectionSet against an Episode's targets under a RunConfig."""
    positions = [t.position for t in episode.targets]
    boxes = np.array([t.box.values for t in episode.targets]).reshape(-1, 4)
    return total_loss(detections.layers, positions, boxes, episode.support.null_index, cfg.lambdas,
                      cfg.null_weight, cfg.aux_loss)
