"""Greedy NMS and the teacher+CAM pseudo-label fusion rule.

Fusion is epoch-gated: while pseudo-labels from the teacher are still
unreliable (the first `cam_epochs` epochs), the teacher contributes only
its single most confident detection, merged with the CAM-derived boxes
under NMS. From `cam_epochs` onward the teacher's detections pass through
unchanged.

Detections serialize as JSONL, one record per line:
    {"image_id": str, "score": float, "box": [x0, y0, x1, y1], "source": str}
"""
from __future__ import annotations

import json
from dataclasses import dataclass

from .geometry import BoundingBox, iou

SOURCES = ("teacher", "cam", "ground-truth")

DEFAULT_TAU_NMS = 0.2
DEFAULT_CAM_EPOCHS = 2


@dataclass(frozen=True)
class Detection:
    """A scored box with a provenance tag (teacher | cam | ground-truth)."""

    score: float
    box: BoundingBox
    source: str = "teacher"

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"detection score must lie in [0, 1], got {self.score}")
        if self.source not in SOURCES:
            raise ValueError(f"unknown detection source {self.source!r}")


def nms(dets: list[Detection], tau_nms: float) -> list[Detection]:
    """Greedy non-maximum suppression.

    Repeatedly pops the highest-score detection into the output and drops
    every remaining detection whose IoU with it is >= tau_nms. Score ties
    pop in original input order so output files are reproducible. Output
    is sorted by descending score; scores and boxes pass through unchanged.
    """
    if not (0.0 <= tau_nms <= 1.0):
        raise ValueError(f"tau_nms must lie in [0, 1], got {tau_nms}")
    pool = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept: list[Detection] = []
    while pool:
        best = pool.pop(0)
        kept.append(dets[best])
        pool = [i for i in pool if iou(dets[best].box, dets[i].box) < tau_nms]
    return kept


def top_detection(dets: list[Detection]) -> Detection:
    """The most confident detection; ties break to the lowest input index."""
    if not dets:
        raise ValueError("teacher produced no detections")
    best = dets[0]
    for d in dets[1:]:
        if d.score > best.score:
            best = d
    return best


def fuse_pseudo_labels(
    teacher: list[Detection],
    cam: list[Detection],
    tau_nms: float = DEFAULT_TAU_NMS,
    epoch: int = 0,
    cam_epochs: int = DEFAULT_CAM_EPOCHS,
) -> list[Detection]:
    """Build the pseudo-label set for one weakly-annotated image.

    During the CAM phase (epoch < cam_epochs) the teacher's most confident
    detection joins the CAM boxes and the merged set is de-duplicated with
    NMS; a teacher that emitted nothing falls back to CAM-only fusion.
    Afterwards the pseudo-labels are the teacher's detections, unchanged.
    """
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if epoch >= cam_epochs:
        return list(teacher)
    merged = list(cam)
    if teacher:
        merged.append(top_detection(teacher))
    return nms(merged, tau_nms)


# ---------------------------------------------------------------------------
# JSONL wire format

def detection_to_record(image_id: str, det: Detection) -> dict:
    return {
        "image_id": image_id,
        "score": float(det.score),
        "box": det.box.to_list(),
        "source": det.source,
    }


def detection_from_record(rec: dict) -> tuple[str, Detection]:
    try:
        image_id = rec["image_id"]
        det = Detection(
            score=float(rec["score"]),
            box=BoundingBox.from_list(rec["box"]),
            source=rec.get("source", "teacher"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"bad detection record: {exc}") from exc
    return image_id, det


def write_detections_jsonl(path, items: list[tuple[str, Detection]]) -> None:
    """items are (image_id, detection) pairs, written in the given order."""
    with open(path, "w", encoding="utf-8") as f:
        for image_id, det in items:
            f.write(json.dumps(detection_to_record(image_id, det)) + "\n")


def read_detections_jsonl(path) -> list[tuple[str, Detection]]:
    """Parse a detections file; errors name the offending line number."""
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                out.append(detection_from_record(rec))
            except ValueError as exc:
                raise ValueError(f"line {lineno}: {exc}") from exc
    return out


def group_by_image(items: list[tuple[str, Detection]]) -> dict[str, list[Detection]]:
    """Group (image_id, detection) pairs preserving per-image input order."""
    grouped: dict[str, list[Detection]] = {}
    for image_id, det in items:
        grouped.setdefault(image_id, []).append(det)
    return grouped
