"""wsdet: teacher-student semi-supervised lesion detection toolkit.

Algorithmic core for detection with incomplete annotations: heatmap to
pseudo-box conversion, NMS-based pseudo-label fusion, EMA teacher updates
with selectable normalization-statistics strategies, a toy grid detector
running the full SSL loop on synthetic data, and the matching detection
metrics (mAP at IoU 0.2, FROC, Recall at 0.5 FPPI).
"""

from .geometry import BoundingBox, area, iou
from .fusion import Detection, fuse_pseudo_labels, nms, top_detection
from .heatmap import binarize, cam_to_boxes, connected_components, ComponentMask
from .ema import NormStrategy, ParameterState, apply_norm_strategy, ema_update
from .metrics import (
    EvalSet,
    FrocCurve,
    froc,
    match_detections,
    mean_average_precision,
    recall_at_fppi,
)
from .toydet import (
    GridDetector,
    LossBreakdown,
    TrainConfig,
    TrainReport,
    predict,
    student_step,
    supervised_loss,
    train,
    weak_loss,
)
from .dataset import (
    AnnotationRecord,
    SplitDataset,
    SyntheticConfig,
    generate_synthetic,
    split_partial,
)

__version__ = "0.1.0"

__all__ = [
    "BoundingBox", "area", "iou",
    "Detection", "nms", "top_detection", "fuse_pseudo_labels",
    "binarize", "connected_components", "cam_to_boxes", "ComponentMask",
    "ParameterState", "NormStrategy", "ema_update", "apply_norm_strategy",
    "EvalSet", "FrocCurve", "match_detections", "mean_average_precision",
    "froc", "recall_at_fppi",
    "GridDetector", "LossBreakdown", "TrainConfig", "TrainReport",
    "predict", "supervised_loss", "weak_loss", "student_step", "train",
    "AnnotationRecord", "SplitDataset", "SyntheticConfig",
    "generate_synthetic", "split_partial",
    "__version__",
]
