"""Independent reference implementations used only by the tests.

Each oracle deliberately takes a different algorithmic route from the
library: boxes are rasterized instead of intersected in closed form,
components are grown by BFS flood fill instead of union-find, NMS scans
for the maximum instead of sorting, and AP is rebuilt from explicit
threshold enumeration. None of them import the code paths they check.
"""
from __future__ import annotations

from collections import deque

import numpy as np


def rasterized_intersection(a, b, size: int = 64) -> int:
    """Pixel count of the overlap of two integer-coordinate boxes on a lattice."""
    grid_a = np.zeros((size, size), dtype=bool)
    grid_b = np.zeros((size, size), dtype=bool)
    ax0, ay0, ax1, ay1 = (int(v) for v in a)
    bx0, by0, bx1, by1 = (int(v) for v in b)
    grid_a[ay0:ay1, ax0:ax1] = True
    grid_b[by0:by1, bx0:bx1] = True
    return int((grid_a & grid_b).sum())


def rasterized_iou(a, b, size: int = 64) -> float:
    grid_a = np.zeros((size, size), dtype=bool)
    grid_b = np.zeros((size, size), dtype=bool)
    ax0, ay0, ax1, ay1 = (int(v) for v in a)
    bx0, by0, bx1, by1 = (int(v) for v in b)
    grid_a[ay0:ay1, ax0:ax1] = True
    grid_b[by0:by1, bx0:bx1] = True
    inter = int((grid_a & grid_b).sum())
    union = int((grid_a | grid_b).sum())
    return inter / union if union else 0.0


def flood_fill_components(grid: np.ndarray, connectivity: int) -> list[frozenset]:
    """BFS flood fill over the non-zero pixels; returns pixel-coordinate sets."""
    if connectivity == 4:
        steps = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    elif connectivity == 8:
        steps = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)]
    else:
        raise ValueError(connectivity)
    h, w = grid.shape
    seen = np.zeros((h, w), dtype=bool)
    comps = []
    for y in range(h):
        for x in range(w):
            if grid[y, x] <= 0 or seen[y, x]:
                continue
            comp = set()
            queue = deque([(y, x)])
            seen[y, x] = True
            while queue:
                cy, cx = queue.popleft()
                comp.add((cy, cx))
                for dy, dx in steps:
                    ny, nx = cy + dy, cx + dx
                    if 0 <= ny < h and 0 <= nx < w and grid[ny, nx] > 0 and not seen[ny, nx]:
                        seen[ny, nx] = True
                        queue.append((ny, nx))
            comps.append(frozenset(comp))
    return comps


def _box_iou(a, b) -> float:
    ix0, iy0 = max(a[0], b[0]), max(a[1], b[1])
    ix1, iy1 = min(a[2], b[2]), min(a[3], b[3])
    if ix1 <= ix0 or iy1 <= iy0:
        return 0.0
    inter = (ix1 - ix0) * (iy1 - iy0)
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def brute_force_nms(scored_boxes: list[tuple[float, tuple]], tau: float) -> list[int]:
    """Indices kept by literal greedy suppression, no sorting involved.

    scored_boxes are (score, (x0, y0, x1, y1)) tuples; the survivor list is
    in pop order (descending score, ties by index).
    """
    n = len(scored_boxes)
    alive = [True] * n
    kept = []
    while True:
        best = -1
        for i in range(n):
            if alive[i] and (best < 0 or scored_boxes[i][0] > scored_boxes[best][0]):
                best = i
        if best < 0:
            break
        kept.append(best)
        alive[best] = False
        for i in range(n):
            if alive[i] and _box_iou(scored_boxes[best][1], scored_boxes[i][1]) >= tau:
                alive[i] = False
    return kept


def _greedy_match_count(gt_boxes: list[tuple], dets: list[tuple[float, tuple]], thresh: float) -> int:
    """TP count of score-ordered greedy matching, reimplemented from scratch."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][0], i))
    taken = [False] * len(gt_boxes)
    tp = 0
    for i in order:
        best_j, best_v = -1, 0.0
        for j, g in enumerate(gt_boxes):
            if taken[j]:
                continue
            v = _box_iou(dets[i][1], g)
            if v > best_v:
                best_j, best_v = j, v
        if best_j >= 0 and best_v >= thresh:
            taken[best_j] = True
            tp += 1
    return tp


def threshold_sweep_ap(
    images: dict[str, tuple[list[tuple], list[tuple[float, tuple]]]], iou_thresh: float
) -> float:
    """AP by explicit threshold enumeration and precision-envelope integration.

    images maps image_id -> (gt_boxes, detections); a threshold admits
    every detection scoring >= it, matching runs per image from scratch at
    every threshold, and the envelope is integrated over the recall steps.
    """
    n_gt = sum(len(g) for g, _ in images.values())
    if n_gt == 0:
        raise ValueError("no ground truth")
    scores = sorted({s for _, dets in images.values() for s, _ in dets}, reverse=True)
    points = []
    for t in scores:
        tp = 0
        n_det = 0
        for gt_boxes, dets in images.values():
            subset = [d for d in dets if d[0] >= t]
            n_det += len(subset)
            tp += _greedy_match_count(gt_boxes, subset, iou_thresh)
        points.append((tp / n_gt, tp / n_det))
    if not points:
        return 0.0
    recalls = sorted({r for r, _ in points})
    ap = 0.0
    prev = 0.0
    for r in recalls:
        envelope = max(p for rr, p in points if rr >= r)
        ap += (r - prev) * envelope
        prev = r
    return ap


def central_difference_gradient(loss_fn, theta: np.ndarray, h: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        up = theta.copy()
        down = theta.copy()
        up[i] += h
        down[i] -= h
        grad[i] = (loss_fn(up) - loss_fn(down)) / (2.0 * h)
    return grad
