"""Detection evaluation: greedy TP/FP matching, average precision, FROC.

A detection counts as a true positive when it overlaps an unmatched
ground-truth box with IoU >= the threshold (0.2 for the lesion task);
each ground truth can be claimed once and higher-scoring detections claim
first. Detections are pooled globally across images (not averaged
per-image) and the PR curve is integrated with the all-points precision
envelope. There is one malignant class, so mAP equals AP.

Score ties are handled with ">=" threshold semantics: detections sharing
a score enter together at their threshold, and matching ties resolve by
input order, so results are bit-stable across runs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .fusion import Detection
from .geometry import BoundingBox, iou

DEFAULT_IOU_THRESH = 0.2
DEFAULT_TARGET_FPPI = 0.5


@dataclass
class EvalSet:
    """Per-image ground-truth boxes and scored detections, keyed by image id."""

    gts: dict[str, list[BoundingBox]] = field(default_factory=dict)
    dets: dict[str, list[Detection]] = field(default_factory=dict)

    def add_image(self, image_id: str, gt_boxes: list[BoundingBox]) -> None:
        if image_id in self.gts:
            raise ValueError(f"duplicate image id {image_id!r}")
        self.gts[image_id] = list(gt_boxes)
        self.dets.setdefault(image_id, [])

    def add_detection(self, image_id: str, det: Detection) -> None:
        if image_id not in self.gts:
            raise ValueError(f"detection references unknown image id {image_id!r}")
        self.dets[image_id].append(det)

    @property
    def n_images(self) -> int:
        return len(self.gts)

    @property
    def n_gt(self) -> int:
        return sum(len(v) for v in self.gts.values())


@dataclass
class FrocCurve:
    """Operating points (fppi, recall), both non-decreasing along the curve."""

    points: list[tuple[float, float]]

    def __post_init__(self):
        for (f0, r0), (f1, r1) in zip(self.points, self.points[1:]):
            if f1 < f0 or r1 < r0:
                raise ValueError("FROC operating points must be monotone")
        for f, r in self.points:
            if f < 0 or not (0.0 <= r <= 1.0):
                raise ValueError(f"invalid operating point ({f}, {r})")


def match_detections(
    gts: list[BoundingBox], dets: list[Detection], iou_thresh: float
) -> list[bool]:
    """Greedy TP/FP flags for one image, aligned with the input det order.

    Detections are visited by descending score (ties by input order); each
    claims the unmatched ground truth of highest IoU if that IoU reaches
    the threshold, otherwise it is a false positive.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    taken = [False] * len(gts)
    flags = [False] * len(dets)
    for i in order:
        best_j, best_iou = -1, 0.0
        for j, gt in enumerate(gts):
            if taken[j]:
                continue
            v = iou(dets[i].box, gt)
            if v > best_iou:
                best_j, best_iou = j, v
        if best_j >= 0 and best_iou >= iou_thresh:
            taken[best_j] = True
            flags[i] = True
    return flags


def _pooled_flags(eval_set: EvalSet, iou_thresh: float) -> list[tuple[float, bool]]:
    """(score, is_tp) for every detection, pooled in fixed image-id order."""
    pooled = []
    for image_id in sorted(eval_set.gts):
        dets = eval_set.dets.get(image_id, [])
        flags = match_detections(eval_set.gts[image_id], dets, iou_thresh)
        pooled.extend((d.score, f) for d, f in zip(dets, flags))
    pooled.sort(key=lambda t: -t[0])  # stable: ties keep pooled order
    return pooled


def precision_recall_points(
    eval_set: EvalSet, iou_thresh: float = DEFAULT_IOU_THRESH
) -> list[tuple[float, float]]:
    """(recall, precision) at each distinct score threshold, descending.

    Tied scores are consumed as one block (a threshold admits every
    detection scoring >= it), so each point is an operating point some
    threshold can actually reach.
    """
    n_gt = eval_set.n_gt
    if n_gt == 0:
        raise ValueError("evaluation set has no ground-truth boxes; recall is undefined")
    pooled = _pooled_flags(eval_set, iou_thresh)
    points = []
    tp = fp = 0
    k = 0
    while k < len(pooled):
        score = pooled[k][0]
        while k < len(pooled) and pooled[k][0] == score:
            if pooled[k][1]:
                tp += 1
            else:
                fp += 1
            k += 1
        points.append((tp / n_gt, tp / (tp + fp)))
    return points


def mean_average_precision(eval_set: EvalSet, iou_thresh: float = DEFAULT_IOU_THRESH) -> float:
    """Area under the all-points precision envelope of the pooled PR curve."""
    points = precision_recall_points(eval_set, iou_thresh)
    if not points:
        return 0.0
    env = [p for _, p in points]
    for k in range(len(env) - 2, -1, -1):
        env[k] = max(env[k], env[k + 1])
    ap = 0.0
    prev_recall = 0.0
    for (recall, _), p_env in zip(points, env):
        ap += (recall - prev_recall) * p_env
        prev_recall = recall
    return ap


def froc(eval_set: EvalSet, iou_thresh: float = DEFAULT_IOU_THRESH) -> FrocCurve:
    """Sweep the score threshold over all distinct detection scores.

    Each threshold yields (false positives per image, recall); sweeping
    downward both are non-decreasing, and points sharing an FPPI collapse
    to the best recall reached there.
    """
    if eval_set.n_images < 1:
        raise ValueError("evaluation set has no images")
    n_gt = eval_set.n_gt
    if n_gt == 0:
        raise ValueError("evaluation set has no ground-truth boxes; recall is undefined")
    pooled = _pooled_flags(eval_set, iou_thresh)
    if not pooled:
        return FrocCurve([(0.0, 0.0)])
    n_images = eval_set.n_images
    points: list[tuple[float, float]] = []
    tp = fp = 0
    k = 0
    while k < len(pooled):
        score = pooled[k][0]
        while k < len(pooled) and pooled[k][0] == score:
            if pooled[k][1]:
                tp += 1
            else:
                fp += 1
            k += 1
        pt = (fp / n_images, tp / n_gt)
        if points and points[-1][0] == pt[0]:
            points[-1] = pt  # same fppi: keep the deeper sweep's recall
        else:
            points.append(pt)
    return FrocCurve(points)


def recall_at_fppi(curve: FrocCurve, target_fppi: float = DEFAULT_TARGET_FPPI) -> float:
    """Step-function reading: recall of the largest operating point within budget."""
    if target_fppi < 0:
        raise ValueError(f"target FPPI must be >= 0, got {target_fppi}")
    best = 0.0
    for fppi, recall in curve.points:
        if fppi <= target_fppi:
            best = recall
        else:
            break
    return best
