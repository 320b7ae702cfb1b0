"""How teacher detections and CAM boxes merge into pseudo-labels.

Early in training the teacher is unreliable, so only its single most
confident box joins the CAM detections and NMS removes duplicates. Once
the schedule passes cam_epochs, the teacher's detections are trusted
as-is.

Run:  python demos/02_pseudo_label_fusion.py
"""
from wsdet.fusion import Detection, fuse_pseudo_labels, nms, top_detection
from wsdet.geometry import BoundingBox


def show(label, dets):
    print(label)
    for d in dets:
        print(f"  {d.source:8s} score {d.score:.2f}  box {d.box.to_list()}")


# the teacher fires three times: a confident hit, a duplicate of the CAM
# region, and a low-confidence stray
teacher = [
    Detection(0.91, BoundingBox(10, 10, 30, 30), "teacher"),
    Detection(0.58, BoundingBox(52, 48, 72, 70), "teacher"),
    Detection(0.33, BoundingBox(80, 5, 95, 20), "teacher"),
]
# the pre-trained classifier's CAM proposes two regions
cam = [
    Detection(0.84, BoundingBox(50, 50, 70, 68), "cam"),
    Detection(0.84, BoundingBox(12, 70, 28, 88), "cam"),
]

show("teacher detections:", teacher)
show("CAM detections:", cam)

best = top_detection(teacher)
print(f"\ntop-1 filter keeps only the teacher's best: score {best.score}")

fused_early = fuse_pseudo_labels(teacher, cam, tau_nms=0.2, epoch=0, cam_epochs=2)
show("\nfused pseudo-labels at epoch 0 (CAM phase):", fused_early)
print("note: the teacher's duplicate of the CAM region and its stray are gone;")
print("the survivors never overlap at IoU >= 0.2")

fused_late = fuse_pseudo_labels(teacher, cam, tau_nms=0.2, epoch=4, cam_epochs=2)
show("\nfused pseudo-labels at epoch 4 (teacher-only phase):", fused_late)

# with no teacher detections at all, fusion falls back to NMS over the CAM set
show("\nempty teacher falls back to CAM-only:", fuse_pseudo_labels([], cam, 0.2, 0, 2))
assert fuse_pseudo_labels([], cam, 0.2, 0, 2) == nms(cam, 0.2)
