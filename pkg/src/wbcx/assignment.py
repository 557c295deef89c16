"""Optimal bipartite matching between ground-truth cells and prediction slots.

The solver is a shortest-augmenting-path assignment kernel (O(n^3), exact).
It is JIT-compiled with numba by default; set WBCX_DISABLE_NUMBA=1 to run the
identical pure-numpy code path instead (see benchmarks/bench_assignment.py
for a comparison of the two).
"""

from __future__ import annotations

import os
from typing import Sequence

import numpy as np

from .core import CellAnnotation, MatchResult, PredictionSet, corner_giou, center_to_corners, softmax
from .errors import NonFiniteCost, TooManyObjects

USE_NUMBA = os.environ.get("WBCX_DISABLE_NUMBA", "0") not in ("1", "true", "yes")


def _solve_rectangular(cost):
    """Minimum-cost injective assignment of rows to columns, M <= N.

    Returns col4row: for each row, the assigned column index. Dual-variable
    shortest augmenting path; deterministic (ascending column scan, so cost
    ties resolve toward lower column indices).
    """
    m, n = cost.shape
    u = np.zeros(m, dtype=np.float64)
    v = np.zeros(n, dtype=np.float64)
    col4row = np.full(m, -1, dtype=np.int64)
    row4col = np.full(n, -1, dtype=np.int64)
    path = np.full(n, -1, dtype=np.int64)

    for cur_row in range(m):
        shortest = np.full(n, np.inf, dtype=np.float64)
        row_visited = np.zeros(m, dtype=np.bool_)
        col_visited = np.zeros(n, dtype=np.bool_)
        min_val = 0.0
        i = cur_row
        sink = -1
        while sink == -1:
            row_visited[i] = True
            lowest = np.inf
            index = -1
            for j in range(n):
                if not col_visited[j]:
                    r = min_val + cost[i, j] - u[i] - v[j]
                    if r < shortest[j]:
                        shortest[j] = r
                        path[j] = i
                    if shortest[j] < lowest or (shortest[j] == lowest and row4col[j] == -1):
                        lowest = shortest[j]
                        index = j
            min_val = lowest
            col_visited[index] = True
            if row4col[index] == -1:
                sink = index
            else:
                i = row4col[index]

        u[cur_row] += min_val
        for k in range(m):
            if row_visited[k] and k != cur_row:
                u[k] += min_val - shortest[col4row[k]]
        for j in range(n):
            if col_visited[j]:
                v[j] -= min_val - shortest[j]

        j = sink
        while True:
            i = path[j]
            row4col[j] = i
            col4row[i], j = j, col4row[i]
            if i == cur_row:
                break
    return col4row


if USE_NUMBA:
    import numba

    _solve_kernel = numba.njit(cache=True)(_solve_rectangular)
else:
    _solve_kernel = _solve_rectangular


def hungarian(costs: np.ndarray) -> MatchResult:
    """Exact minimum-cost assignment of M rows to N >= M columns."""
    costs = np.ascontiguousarray(costs, dtype=np.float64)
    if costs.ndim != 2:
        raise ValueError("cost matrix must be 2-D")
    m, n = costs.shape
    if m > n:
        raise TooManyObjects(f"{m} rows but only {n} columns")
    if not np.isfinite(costs).all():
        raise NonFiniteCost("cost matrix contains NaN or infinity")
    if m == 0:
        return MatchResult(sigma={}, n_slots=n)
    col4row = _solve_kernel(costs)
    return MatchResult(sigma={i: int(col4row[i]) for i in range(m)}, n_slots=n)


def matching_cost(gt: CellAnnotation, preds: PredictionSet, slot: int, weights) -> float:
    """Cost of pairing one ground truth with one slot: negative class probability
    plus weighted L1 and GIoU box terms."""
    prob = softmax(preds.class_scores[slot])[gt.cell_class.value]
    gt_box = gt.box.as_array()
    pred_box = np.asarray(preds.boxes[slot], dtype=np.float64)
    l1 = float(np.abs(gt_box - pred_box).sum())
    g = corner_giou(gt.box.corners(), center_to_corners(*pred_box))
    return float(-prob + weights.w_l1 * l1 + weights.w_giou * (1.0 - g))


def cost_matrix_arrays(gt_classes: np.ndarray, gt_boxes: np.ndarray,
                       class_logits: np.ndarray, pred_boxes: np.ndarray,
                       weights) -> np.ndarray:
    """Matching costs from raw arrays: gt_classes (M,), gt_boxes (M, 4) center
    form, class_logits (N, 11), pred_boxes (N, 4)."""
    m = gt_classes.shape[0]
    n = class_logits.shape[0]
    probs = softmax(class_logits, axis=-1)
    out = np.empty((m, n), dtype=np.float64)
    for i in range(m):
        gt_corners = center_to_corners(*gt_boxes[i])
        for j in range(n):
            l1 = float(np.abs(gt_boxes[i] - pred_boxes[j]).sum())
            g = corner_giou(gt_corners, center_to_corners(*pred_boxes[j]))
            out[i, j] = (-probs[j, int(gt_classes[i])]
                         + weights.w_l1 * l1 + weights.w_giou * (1.0 - g))
    return out


def cost_matrix(gts: Sequence[CellAnnotation], preds: PredictionSet, weights) -> np.ndarray:
    gt_classes = np.array([gt.cell_class.value for gt in gts], dtype=np.int64)
    gt_boxes = np.stack([gt.box.as_array() for gt in gts])
    return cost_matrix_arrays(gt_classes, gt_boxes, preds.class_scores,
                              np.asarray(preds.boxes, dtype=np.float64), weights)


def match_sets(gts: Sequence[CellAnnotation], preds: PredictionSet, weights) -> MatchResult:
    """Build the matching-cost matrix and solve it."""
    if len(gts) > preds.n_slots:
        raise TooManyObjects(f"{len(gts)} ground truths exceed {preds.n_slots} slots")
    if not gts:
        return MatchResult(sigma={}, n_slots=preds.n_slots)
    return hungarian(cost_matrix(gts, preds, weights))
