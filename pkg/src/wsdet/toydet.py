"""A minimal differentiable grid detector for exercising the SSL loop.

The detector partitions the image into grid_h x grid_w cells. Each cell
owns a classification weight vector and four box-offset weight vectors
over that cell's (fixed, precomputed) feature vector; the cell's anchor is
its own pixel extent. Scores are sigmoids of linear logits and boxes are
the anchor shifted/scaled by the regression output, so every gradient has
a closed form and can be checked against finite differences.

The loss keeps the four-term shape of a two-stage detector: one
(classification, regression) pair is computed and populates both the
RPN-like and the RoI-like slots, which stay structurally identical by
construction. Classification is binary cross-entropy over all cells
against the anchor-matching assignment, regression is smooth-L1 on the
positive cells' offsets, both sum-reduced.

Training runs the teacher-student loop: the teacher pseudo-labels the
weakly-annotated batch (CAM-fused during the first cam_epochs), the
student descends the combined loss, the teacher tracks the student by EMA,
and the chosen normalization strategy advances the running statistics.
Inference-time evaluation uses the teacher.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace, asdict

import numpy as np

from .ema import NormStrategy, ParameterState, apply_norm_strategy, ema_update
from .fusion import DEFAULT_CAM_EPOCHS, DEFAULT_TAU_NMS, Detection, fuse_pseudo_labels, nms
from .geometry import BoundingBox
from .metrics import (
    DEFAULT_IOU_THRESH,
    DEFAULT_TARGET_FPPI,
    EvalSet,
    froc,
    mean_average_precision,
    recall_at_fppi,
)

NORM_EPS = 1e-5
SMOOTH_L1_BETA = 1.0
OFFSET_CLIP = 8.0  # decode-time safety rail against exp overflow
DEFAULT_MATCH_IOU = 0.2


@dataclass(frozen=True)
class GridDetector:
    """Grid configuration plus the parameter snapshot driving it."""

    grid_h: int
    grid_w: int
    feature_dim: int
    image_h: float
    image_w: float
    params: ParameterState

    def __post_init__(self):
        if self.grid_h < 1 or self.grid_w < 1 or self.feature_dim < 1:
            raise ValueError("grid dimensions and feature_dim must be >= 1")
        expected = self.n_cells * 5 * self.feature_dim
        if self.params.theta.size != expected:
            raise ValueError(
                f"theta has {self.params.theta.size} entries, "
                f"configuration requires {expected}"
            )
        if self.params.norm_mean.size != self.feature_dim:
            raise ValueError(
                f"norm statistics cover {self.params.norm_mean.size} channels, "
                f"expected {self.feature_dim}"
            )

    @property
    def n_cells(self) -> int:
        return self.grid_h * self.grid_w

    def anchors(self) -> np.ndarray:
        """(n_cells, 4) array of per-cell base boxes in pixel coordinates."""
        ch = self.image_h / self.grid_h
        cw = self.image_w / self.grid_w
        ii, jj = np.meshgrid(np.arange(self.grid_h), np.arange(self.grid_w), indexing="ij")
        x0 = (jj * cw).ravel()
        y0 = (ii * ch).ravel()
        return np.stack([x0, y0, x0 + cw, y0 + ch], axis=1)

    def with_params(self, params: ParameterState) -> "GridDetector":
        return replace(self, params=params)


def init_detector(
    grid_h: int,
    grid_w: int,
    feature_dim: int,
    image_h: float,
    image_w: float,
    rng: np.random.Generator | None = None,
    init_scale: float = 0.01,
) -> GridDetector:
    """Fresh detector; zero weights unless an rng supplies a small random init."""
    n = grid_h * grid_w * 5 * feature_dim
    theta = np.zeros(n) if rng is None else init_scale * rng.standard_normal(n)
    params = ParameterState(theta, np.zeros(feature_dim), np.ones(feature_dim))
    return GridDetector(grid_h, grid_w, feature_dim, image_h, image_w, params)


@dataclass(frozen=True)
class LossBreakdown:
    cls_rpn: float
    reg_rpn: float
    cls_roi: float
    reg_roi: float
    total: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(
            self, "total", self.cls_rpn + self.reg_rpn + self.cls_roi + self.reg_roi
        )

    @classmethod
    def from_heads(cls, cls_term: float, reg_term: float) -> "LossBreakdown":
        return cls(cls_term, reg_term, cls_term, reg_term)

    @classmethod
    def zero(cls) -> "LossBreakdown":
        return cls(0.0, 0.0, 0.0, 0.0)

    def __add__(self, other: "LossBreakdown") -> "LossBreakdown":
        return LossBreakdown(
            self.cls_rpn + other.cls_rpn,
            self.reg_rpn + other.reg_rpn,
            self.cls_roi + other.cls_roi,
            self.reg_roi + other.reg_roi,
        )


# ---------------------------------------------------------------------------
# forward pass

def _split_theta(det: GridDetector) -> tuple[np.ndarray, np.ndarray]:
    c, d = det.n_cells, det.feature_dim
    theta = det.params.theta
    return theta[: c * d].reshape(c, d), theta[c * d :].reshape(c, 4, d)


def _normalized_features(det: GridDetector, image: np.ndarray) -> np.ndarray:
    feats = np.asarray(image, dtype=np.float64)
    if feats.shape != (det.grid_h, det.grid_w, det.feature_dim):
        raise ValueError(
            f"feature grid shape {feats.shape} does not match detector "
            f"({det.grid_h}, {det.grid_w}, {det.feature_dim})"
        )
    flat = feats.reshape(det.n_cells, det.feature_dim)
    return (flat - det.params.norm_mean) / np.sqrt(det.params.norm_var + NORM_EPS)


def _forward(det: GridDetector, image: np.ndarray):
    """Per-cell logits and raw box offsets; features standardized first."""
    fhat = _normalized_features(det, image)
    w_cls, w_reg = _split_theta(det)
    logits = np.einsum("cd,cd->c", w_cls, fhat)
    offsets = np.einsum("ckd,cd->ck", w_reg, fhat)
    return fhat, logits, offsets


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def encode_offsets(anchors: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Box -> (tx, ty, tw, th) relative to anchors; inverse of decode_offsets."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = (anchors[:, 0] + anchors[:, 2]) / 2
    acy = (anchors[:, 1] + anchors[:, 3]) / 2
    gw = boxes[:, 2] - boxes[:, 0]
    gh = boxes[:, 3] - boxes[:, 1]
    gcx = (boxes[:, 0] + boxes[:, 2]) / 2
    gcy = (boxes[:, 1] + boxes[:, 3]) / 2
    return np.stack(
        [(gcx - acx) / aw, (gcy - acy) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1
    )


def decode_offsets(anchors: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """(tx, ty, tw, th) -> boxes; zero offsets reproduce the anchors exactly."""
    t = np.clip(offsets, -OFFSET_CLIP, OFFSET_CLIP)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = (anchors[:, 0] + anchors[:, 2]) / 2
    acy = (anchors[:, 1] + anchors[:, 3]) / 2
    cx = acx + t[:, 0] * aw
    cy = acy + t[:, 1] * ah
    w = aw * np.exp(t[:, 2])
    h = ah * np.exp(t[:, 3])
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


def predict(
    det: GridDetector,
    image: np.ndarray,
    score_thresh: float = 0.5,
    tau_nms: float = DEFAULT_TAU_NMS,
    source: str = "teacher",
) -> list[Detection]:
    """Decode every cell, keep cells scoring strictly above the threshold, NMS.

    Decoded boxes are clipped to the image; the rare box that degenerates
    under clipping is dropped.
    """
    _, logits, offsets = _forward(det, image)
    scores = _sigmoid(logits)
    boxes = decode_offsets(det.anchors(), offsets)
    out = []
    for c in np.flatnonzero(scores > score_thresh):
        x0 = min(max(boxes[c, 0], 0.0), det.image_w)
        y0 = min(max(boxes[c, 1], 0.0), det.image_h)
        x1 = min(max(boxes[c, 2], 0.0), det.image_w)
        y1 = min(max(boxes[c, 3], 0.0), det.image_h)
        if x1 - x0 <= 0 or y1 - y0 <= 0:
            continue
        out.append(Detection(float(scores[c]), BoundingBox(x0, y0, x1, y1), source))
    return nms(out, tau_nms)


# ---------------------------------------------------------------------------
# losses and gradients

def assign_targets(
    det: GridDetector, label_boxes: list[BoundingBox], match_iou: float = DEFAULT_MATCH_IOU
):
    """Cell assignment: positive when anchor IoU with any label reaches the
    threshold; additionally every label force-matches its best-IoU cell so no
    target goes unrepresented. Positive cells regress toward their highest-IoU
    label."""
    anchors = det.anchors()
    n = det.n_cells
    y = np.zeros(n)
    t_targets = np.zeros((n, 4))
    if not label_boxes:
        return y, t_targets

    boxes = np.array([[b.x0, b.y0, b.x1, b.y1] for b in label_boxes])
    ix0 = np.maximum(anchors[:, None, 0], boxes[None, :, 0])
    iy0 = np.maximum(anchors[:, None, 1], boxes[None, :, 1])
    ix1 = np.minimum(anchors[:, None, 2], boxes[None, :, 2])
    iy1 = np.minimum(anchors[:, None, 3], boxes[None, :, 3])
    inter = np.clip(ix1 - ix0, 0, None) * np.clip(iy1 - iy0, 0, None)
    area_a = (anchors[:, 2] - anchors[:, 0]) * (anchors[:, 3] - anchors[:, 1])
    area_b = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    ious = inter / (area_a[:, None] + area_b[None, :] - inter)

    pos = ious.max(axis=1) >= match_iou
    for j in range(len(label_boxes)):
        if ious[:, j].max() > 0:
            pos[int(np.argmax(ious[:, j]))] = True
    y[pos] = 1.0
    best = np.argmax(ious, axis=1)
    idx = np.flatnonzero(pos)
    t_targets[idx] = encode_offsets(anchors[idx], boxes[best[idx]])
    return y, t_targets


def _bce_with_logits(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))


def _smooth_l1(d: np.ndarray) -> np.ndarray:
    a = np.abs(d)
    return np.where(a < SMOOTH_L1_BETA, 0.5 * d * d / SMOOTH_L1_BETA, a - 0.5 * SMOOTH_L1_BETA)


def _smooth_l1_grad(d: np.ndarray) -> np.ndarray:
    return np.where(np.abs(d) < SMOOTH_L1_BETA, d / SMOOTH_L1_BETA, np.sign(d))


def supervised_loss(
    det: GridDetector,
    image: np.ndarray,
    labels: list[Detection],
    match_iou: float = DEFAULT_MATCH_IOU,
) -> LossBreakdown:
    """Four-term loss of one fully-annotated image (targets: ground truth)."""
    loss, _ = _image_loss(det, image, labels, match_iou)
    return loss


def weak_loss(
    det: GridDetector,
    image: np.ndarray,
    pseudo: list[Detection],
    match_iou: float = DEFAULT_MATCH_IOU,
) -> LossBreakdown:
    """Identical computation to supervised_loss with pseudo-labels as targets."""
    loss, _ = _image_loss(det, image, pseudo, match_iou)
    return loss


def _image_loss(det: GridDetector, image: np.ndarray, targets: list[Detection], match_iou: float):
    """One image's LossBreakdown and its gradient w.r.t. the flat theta."""
    fhat, logits, offsets = _forward(det, image)
    label_boxes = [t.box for t in targets]
    y, t_targets = assign_targets(det, label_boxes, match_iou)

    cls_term = float(_bce_with_logits(logits, y).sum())
    pos = y > 0
    delta = offsets[pos] - t_targets[pos]
    reg_term = float(_smooth_l1(delta).sum())

    # both head slots carry the same (cls, reg) pair, hence the factor 2
    g_cls = 2.0 * (_sigmoid(logits) - y)[:, None] * fhat
    g_reg = np.zeros((det.n_cells, 4, det.feature_dim))
    g_reg[pos] = 2.0 * _smooth_l1_grad(delta)[:, :, None] * fhat[pos][:, None, :]
    grad = np.concatenate([g_cls.ravel(), g_reg.ravel()])
    return LossBreakdown.from_heads(cls_term, reg_term), grad


def batch_loss_and_grad(
    det: GridDetector,
    batch: list[tuple[np.ndarray, list[Detection]]],
    match_iou: float = DEFAULT_MATCH_IOU,
):
    """Sum of per-image losses and gradients, accumulated in batch order."""
    total = LossBreakdown.zero()
    grad = np.zeros_like(det.params.theta)
    for image, targets in batch:
        loss, g = _image_loss(det, image, targets, match_iou)
        total = total + loss
        grad += g
    return total, grad


def student_step(
    student: GridDetector,
    batch_s: list[tuple[np.ndarray, list[Detection]]],
    batch_w: list[tuple[np.ndarray, list[Detection]]],
    lambda_weak: float = 0.25,
    lr: float = 0.05,
    match_iou: float = DEFAULT_MATCH_IOU,
) -> GridDetector:
    """One gradient-descent step on sup(batch_s) + lambda * weak(batch_w)."""
    det, _, _ = _student_step(student, batch_s, batch_w, lambda_weak, lr, match_iou)
    return det


def _student_step(student, batch_s, batch_w, lambda_weak, lr, match_iou):
    if lambda_weak < 0:
        raise ValueError(f"lambda_weak must be >= 0, got {lambda_weak}")
    loss_s, grad_s = batch_loss_and_grad(student, batch_s, match_iou)
    loss_w, grad_w = batch_loss_and_grad(student, batch_w, match_iou)
    total = loss_s.total + lambda_weak * loss_w.total
    if not math.isfinite(total):
        raise RuntimeError(
            f"non-finite training loss (sup={loss_s.total}, weak={loss_w.total}); "
            "step aborted; reduce the learning rate or inspect the batch"
        )
    grad = grad_s + lambda_weak * grad_w
    new_theta = student.params.theta - lr * grad
    new_params = ParameterState(new_theta, student.params.norm_mean, student.params.norm_var)
    return student.with_params(new_params), loss_s, loss_w


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainConfig:
    epochs: int = 10
    steps_per_epoch: int = 20
    batch_full: int = 4
    batch_weak: int = 4
    lr: float = 0.05
    lambda_weak: float = 0.25
    alpha: float = 0.999
    tau_nms: float = DEFAULT_TAU_NMS
    cam_epochs: int = DEFAULT_CAM_EPOCHS
    pseudo_score_thresh: float = 0.5
    eval_score_thresh: float = 0.05
    match_iou: float = DEFAULT_MATCH_IOU
    eval_iou_thresh: float = DEFAULT_IOU_THRESH
    norm: NormStrategy = field(default_factory=NormStrategy)
    seed: int = 0
    weak_enabled: bool = True
    eval_model: str = "teacher"
    init_scale: float = 0.01
    cam_tau: float = 0.5
    cam_min_area: int = 4
    cam_max_area: int | None = None  # None: a quarter of the image lattice

    def __post_init__(self):
        if self.epochs < 0 or self.steps_per_epoch < 1:
            raise ValueError("epochs must be >= 0 and steps_per_epoch >= 1")
        if self.batch_full < 1 or self.batch_weak < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.lambda_weak < 0:
            raise ValueError("lambda_weak must be >= 0")
        if not (0.0 < self.alpha < 1.0):
            raise ValueError("alpha must lie in (0, 1)")
        if self.cam_epochs < 0:
            raise ValueError("cam_epochs must be >= 0")
        if self.eval_model not in ("teacher", "student"):
            raise ValueError("eval_model must be 'teacher' or 'student'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["norm"] = {"kind": self.norm.kind, "momentum": self.norm.momentum,
                     "alpha": self.norm.alpha}
        return d


@dataclass
class TrainReport:
    config: dict
    epochs: list[dict]
    final: dict | None
    teacher: ParameterState
    student: ParameterState

    def to_dict(self) -> dict:
        return {"config": self.config, "epochs": self.epochs, "final": self.final}


def evaluate_detector(
    det: GridDetector,
    records,
    score_thresh: float = 0.05,
    tau_nms: float = DEFAULT_TAU_NMS,
    iou_thresh: float = DEFAULT_IOU_THRESH,
) -> dict:
    """mAP and Recall@0.5FPPI of a detector over annotated records."""
    ev = EvalSet()
    for rec in records:
        ev.add_image(rec.image_id, [d.box for d in rec.boxes])
        for d in predict(det, rec.features, score_thresh, tau_nms):
            ev.add_detection(rec.image_id, d)
    curve = froc(ev, iou_thresh)
    return {
        "map": mean_average_precision(ev, iou_thresh),
        "recall_at_0.5_fppi": recall_at_fppi(curve, DEFAULT_TARGET_FPPI),
    }


def train(config: TrainConfig, data, test_records) -> TrainReport:
    """Run the full teacher-student loop on a SplitDataset.

    Per step: the teacher predicts on the weak batch, fusion builds the
    pseudo-labels (CAM-merged while epoch < cam_epochs), the student takes
    one descent step on the combined loss, the teacher follows by EMA and
    the normalization strategy advances both models' running statistics.
    Identical (config, data, test) always produces an identical report.
    """
    from .dataset import cam_detections  # local import; dataset builds on heatmap/fusion

    rng = np.random.default_rng(config.seed)
    ref = (data.fully + data.weakly)[0]
    gh, gw, fd = ref.features.shape
    student = init_detector(gh, gw, fd, ref.image_h, ref.image_w, rng, config.init_scale)
    teacher = student  # duplicated start, immutable states

    cam_max_area = config.cam_max_area
    if cam_max_area is None:
        cam_max_area = int(ref.image_h * ref.image_w) // 4
    cam_boxes = {
        rec.image_id: cam_detections(
            rec, tau=config.cam_tau, min_area=config.cam_min_area, max_area=cam_max_area
        )
        for rec in data.weakly
    }

    n_full, n_weak = len(data.fully), len(data.weakly)
    if n_full == 0:
        raise ValueError("training requires at least one fully-annotated record")
    use_weak = config.weak_enabled and n_weak > 0

    epoch_rows: list[dict] = []
    for epoch in range(config.epochs):
        sums = {"sup": 0.0, "weak": 0.0, "stu": 0.0}
        for _ in range(config.steps_per_epoch):
            idx = rng.integers(0, n_full, size=config.batch_full)
            batch_s = [(data.fully[i].features, data.fully[i].boxes) for i in idx]

            batch_w = []
            if use_weak:
                jdx = rng.integers(0, n_weak, size=config.batch_weak)
                for j in jdx:
                    rec = data.weakly[j]
                    teacher_dets = predict(
                        teacher, rec.features, config.pseudo_score_thresh, config.tau_nms
                    )
                    pseudo = fuse_pseudo_labels(
                        teacher_dets,
                        cam_boxes[rec.image_id],
                        config.tau_nms,
                        epoch=epoch,
                        cam_epochs=config.cam_epochs,
                    )
                    batch_w.append((rec.features, pseudo))

            student, loss_s, loss_w = _student_step(
                student, batch_s, batch_w, config.lambda_weak, config.lr, config.match_iou
            )
            teacher = teacher.with_params(
                ema_update(teacher.params, student.params, config.alpha)
            )

            feats = np.concatenate(
                [img.reshape(-1, fd) for img, _ in batch_s + batch_w], axis=0
            )
            t_params, s_params = apply_norm_strategy(
                config.norm, teacher.params, student.params,
                feats.mean(axis=0), feats.var(axis=0),
            )
            teacher = teacher.with_params(t_params)
            student = student.with_params(s_params)

            sums["sup"] += loss_s.total
            sums["weak"] += loss_w.total
            sums["stu"] += loss_s.total + config.lambda_weak * loss_w.total

        eval_det = teacher if config.eval_model == "teacher" else student
        metrics_row = evaluate_detector(
            eval_det, test_records, config.eval_score_thresh,
            config.tau_nms, config.eval_iou_thresh,
        )
        k = config.steps_per_epoch
        epoch_rows.append({
            "epoch": epoch,
            "loss_sup": sums["sup"] / k,
            "loss_weak": sums["weak"] / k,
            "loss_total": sums["stu"] / k,
            "map": metrics_row["map"],
            "recall_at_0.5_fppi": metrics_row["recall_at_0.5_fppi"],
        })

    final = None
    if epoch_rows:
        final = {
            "map": epoch_rows[-1]["map"],
            "recall_at_0.5_fppi": epoch_rows[-1]["recall_at_0.5_fppi"],
        }
    return TrainReport(
        config=config.to_dict(),
        epochs=epoch_rows,
        final=final,
        teacher=teacher.params,
        student=student.params,
    )
