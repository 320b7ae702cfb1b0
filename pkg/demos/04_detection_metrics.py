"""mAP at IoU 0.2, the FROC curve, and Recall @ 0.5 FPPI on a tiny eval set.

Run:  python demos/04_detection_metrics.py
"""
from wsdet.fusion import Detection
from wsdet.geometry import BoundingBox
from wsdet.metrics import (
    EvalSet,
    froc,
    match_detections,
    mean_average_precision,
    precision_recall_points,
    recall_at_fppi,
)

ev = EvalSet()
ev.add_image("case-a", [BoundingBox(10, 10, 26, 26)])
ev.add_image("case-b", [BoundingBox(40, 40, 58, 56), BoundingBox(5, 60, 18, 74)])
ev.add_image("case-c", [])  # a lesion-free image: only false positives possible

# detector output: two clean hits, one borderline hit, one duplicate, two strays
dets = [
    ("case-a", Detection(0.95, BoundingBox(11, 9, 27, 25))),
    ("case-b", Detection(0.88, BoundingBox(41, 42, 57, 58))),
    ("case-b", Detection(0.74, BoundingBox(43, 40, 60, 55))),   # duplicate of the hit
    ("case-b", Detection(0.65, BoundingBox(2, 62, 15, 70))),    # borderline on truth 2
    ("case-c", Detection(0.52, BoundingBox(20, 20, 34, 32))),   # FP on the clean image
    ("case-a", Detection(0.31, BoundingBox(50, 2, 62, 12))),    # low-scored stray
]
for image_id, d in dets:
    ev.add_detection(image_id, d)

print(f"{ev.n_images} images, {ev.n_gt} ground-truth lesions, "
      f"{sum(len(v) for v in ev.dets.values())} detections")

for image_id in sorted(ev.gts):
    flags = match_detections(ev.gts[image_id], ev.dets[image_id], iou_thresh=0.2)
    tags = ", ".join("TP" if f else "FP" for f in flags) or "-"
    print(f"  {image_id}: {tags}")

print("\nprecision-recall points (one per distinct score threshold):")
for recall, precision in precision_recall_points(ev, iou_thresh=0.2):
    print(f"  recall {recall:.3f}  precision {precision:.3f}")

ap = mean_average_precision(ev, iou_thresh=0.2)
curve = froc(ev, iou_thresh=0.2)
print(f"\nmAP (single malignant class, TP at IoU >= 0.2): {ap:.4f}")
print(f"FROC operating points: {[(round(f, 3), round(r, 3)) for f, r in curve.points]}")
print(f"Recall @ 0.5 FPPI (one false positive every two images): "
      f"{recall_at_fppi(curve, 0.5):.4f}")
