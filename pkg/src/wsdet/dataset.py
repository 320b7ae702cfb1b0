"""Synthetic benchmark data: planted-blob images, simulated CAM heatmaps,
annotation records and the partially-labelled protocol splitter.

Each synthetic image is a pixel lattice carrying 0-3 Gaussian blobs. The
ground-truth box of a blob bounds its half-maximum contour analytically
(center +- sigma * sqrt(2 ln 2) per axis). Because the toy detector
consumes per-cell features rather than pixels, every record also carries a
precomputed feature grid: per cell and per view, a bias term, mean and max
intensity, and the intensity-weighted centroid/spread of the cell's patch.
The auxiliary view is a second rendering of the same scene with
independent noise, concatenated channel-wise.

The simulated CAM is a blurred, gain-scaled, noise-perturbed indicator of
the true boxes: an imperfect classifier's attention map. Records tagged
weakly-annotated keep only the image-level class; their CAM detections are
produced on demand and only for class-1 images.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .fusion import Detection
from .geometry import BoundingBox
from .heatmap import cam_to_boxes, load_array, save_array

HALF_MAX_FACTOR = float(np.sqrt(2.0 * np.log(2.0)))
FEATURES_PER_VIEW = 7


@dataclass
class SyntheticConfig:
    image_h: int = 64
    image_w: int = 64
    grid_h: int = 8
    grid_w: int = 8
    min_blobs: int = 0
    max_blobs: int = 3
    sigma_range: tuple[float, float] = (2.8, 4.5)
    amplitude_range: tuple[float, float] = (0.6, 1.0)
    noise_sigma: float = 0.05
    cam_blur: float = 1.2
    cam_noise: float = 0.03
    cam_gain_range: tuple[float, float] = (0.85, 1.0)
    margin: float = 8.0
    min_separation: float = 16.0
    cam_conf_pos: tuple[float, float] = (0.65, 0.95)
    cam_conf_neg: tuple[float, float] = (0.05, 0.35)

    def __post_init__(self):
        if self.image_h % self.grid_h or self.image_w % self.grid_w:
            raise ValueError("grid must evenly partition the image lattice")
        if self.min_blobs < 0 or self.max_blobs < self.min_blobs:
            raise ValueError("need 0 <= min_blobs <= max_blobs")


@dataclass
class AnnotationRecord:
    """One image's annotation: full (boxes) or weak (image-level class)."""

    image_id: str
    kind: str  # "full" | "weak"
    boxes: list[Detection]
    label: int
    features: np.ndarray
    heatmap: np.ndarray | None
    cam_score: float
    image_h: int
    image_w: int
    auxiliary_image_id: str | None = None

    def __post_init__(self):
        if self.kind not in ("full", "weak"):
            raise ValueError(f"record kind must be 'full' or 'weak', got {self.kind!r}")
        if self.kind == "weak" and self.boxes:
            raise ValueError("weakly-annotated records carry no boxes")
        if self.kind == "full" and self.boxes and self.label != 1:
            raise ValueError("fully-annotated records with boxes imply class 1")
        if self.label not in (0, 1):
            raise ValueError(f"image-level class must be 0 or 1, got {self.label}")


@dataclass
class SplitDataset:
    fully: list[AnnotationRecord]
    weakly: list[AnnotationRecord]
    protocol: str = "full"

    def __post_init__(self):
        full_ids = {r.image_id for r in self.fully}
        weak_ids = {r.image_id for r in self.weakly}
        if full_ids & weak_ids:
            raise ValueError("fully and weakly annotated subsets share image ids")


# ---------------------------------------------------------------------------
# generation

def blob_box(cx: float, cy: float, sigma: float) -> BoundingBox:
    """Tight box around a Gaussian blob's half-maximum contour.

    The isotropic blob drops to half its peak at radius sigma*sqrt(2 ln 2),
    so the box is center +- that radius per axis.
    """
    r = sigma * HALF_MAX_FACTOR
    return BoundingBox(cx - r, cy - r, cx + r, cy + r)


def _render_blobs(h, w, centers, sigmas, amps) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.zeros((h, w))
    for (cx, cy), s, a in zip(centers, sigmas, amps):
        img += a * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * s * s))
    return img


def _cell_features(patch: np.ndarray) -> list[float]:
    ph, pw = patch.shape
    mean = float(patch.mean())
    peak = float(patch.max())
    weights = np.clip(patch - 0.1, 0.0, None)  # floor strips background noise
    total = weights.sum()
    if total > 1e-9:
        xs = (np.arange(pw) + 0.5) / pw - 0.5
        ys = (np.arange(ph) + 0.5) / ph - 0.5
        wx = weights.sum(axis=0)
        wy = weights.sum(axis=1)
        cx = float((wx * xs).sum() / total)
        cy = float((wy * ys).sum() / total)
        sx = float(np.sqrt((wx * (xs - cx) ** 2).sum() / total))
        sy = float(np.sqrt((wy * (ys - cy) ** 2).sum() / total))
    else:
        cx = cy = sx = sy = 0.0
    return [1.0, mean, peak, cx, cy, sx, sy]


def _feature_grid(image: np.ndarray, grid_h: int, grid_w: int) -> np.ndarray:
    h, w = image.shape
    ch, cw = h // grid_h, w // grid_w
    out = np.zeros((grid_h, grid_w, FEATURES_PER_VIEW))
    for i in range(grid_h):
        for j in range(grid_w):
            out[i, j] = _cell_features(image[i * ch : (i + 1) * ch, j * cw : (j + 1) * cw])
    return out


def _place_centers(rng, k, cfg: SyntheticConfig) -> list[tuple[float, float]]:
    centers: list[tuple[float, float]] = []
    for _ in range(k):
        for _attempt in range(100):
            cx = rng.uniform(cfg.margin, cfg.image_w - cfg.margin)
            cy = rng.uniform(cfg.margin, cfg.image_h - cfg.margin)
            if all(
                (cx - ox) ** 2 + (cy - oy) ** 2 >= cfg.min_separation**2
                for ox, oy in centers
            ):
                centers.append((cx, cy))
                break
        # a crowded lattice simply yields fewer blobs
    return centers


def generate_synthetic(
    n_images: int, seed: int, config: SyntheticConfig | None = None
) -> list[AnnotationRecord]:
    """Fully-annotated synthetic records, deterministic under seed.

    Generation is independent per image (each image gets a spawned child
    seed), so records could be produced in parallel without changing bytes.
    """
    if n_images <= 0:
        raise ValueError(f"n_images must be > 0, got {n_images}")
    cfg = config or SyntheticConfig()
    children = np.random.SeedSequence(seed).spawn(n_images)
    records = []
    for i in range(n_images):
        rng = np.random.default_rng(children[i])
        k = int(rng.integers(cfg.min_blobs, cfg.max_blobs + 1))
        centers = _place_centers(rng, k, cfg)
        sigmas = [float(rng.uniform(*cfg.sigma_range)) for _ in centers]
        amps = [float(rng.uniform(*cfg.amplitude_range)) for _ in centers]

        boxes = [
            Detection(1.0, blob_box(cx, cy, s), "ground-truth")
            for (cx, cy), s in zip(centers, sigmas)
        ]
        label = 1 if boxes else 0

        clean = _render_blobs(cfg.image_h, cfg.image_w, centers, sigmas, amps)
        main = clean + rng.normal(0.0, cfg.noise_sigma, clean.shape)
        aux = clean + rng.normal(0.0, cfg.noise_sigma, clean.shape)
        features = np.concatenate(
            [
                _feature_grid(main, cfg.grid_h, cfg.grid_w),
                _feature_grid(aux, cfg.grid_h, cfg.grid_w),
            ],
            axis=2,
        )

        indicator = np.zeros((cfg.image_h, cfg.image_w))
        for d in boxes:
            b = d.box
            indicator[
                int(np.floor(b.y0)) : int(np.ceil(b.y1)),
                int(np.floor(b.x0)) : int(np.ceil(b.x1)),
            ] = 1.0
        gain = float(rng.uniform(*cfg.cam_gain_range))
        cam = gaussian_filter(indicator, cfg.cam_blur) * gain
        cam = cam + rng.normal(0.0, cfg.cam_noise, cam.shape)
        cam = np.clip(cam, 0.0, 1.0)

        conf_range = cfg.cam_conf_pos if label == 1 else cfg.cam_conf_neg
        cam_score = float(rng.uniform(*conf_range))

        records.append(
            AnnotationRecord(
                image_id=f"img{i:05d}",
                kind="full",
                boxes=boxes,
                label=label,
                features=features,
                heatmap=cam,
                cam_score=cam_score,
                image_h=cfg.image_h,
                image_w=cfg.image_w,
            )
        )
    return records


# ---------------------------------------------------------------------------
# protocol splitter

def strip_to_weak(record: AnnotationRecord) -> AnnotationRecord:
    """Demote a fully-annotated record to an image-level label."""
    return AnnotationRecord(
        image_id=record.image_id,
        kind="weak",
        boxes=[],
        label=1 if record.boxes else 0,
        features=record.features,
        heatmap=record.heatmap,
        cam_score=record.cam_score,
        image_h=record.image_h,
        image_w=record.image_w,
        auxiliary_image_id=record.auxiliary_image_id,
    )


def split_partial(records: list[AnnotationRecord], ratio: float, seed: int) -> SplitDataset:
    """Keep boxes for a uniformly sampled floor(ratio * N) subset, demote the rest."""
    if not records:
        raise ValueError("cannot split an empty record list")
    if not (0.0 < ratio <= 1.0):
        raise ValueError(f"ratio must lie in (0, 1], got {ratio}")
    if any(r.kind != "full" for r in records):
        raise ValueError("split_partial expects fully-annotated records")
    n = len(records)
    k = int(np.floor(ratio * n))
    perm = np.random.default_rng(seed).permutation(n)
    keep = set(perm[:k].tolist())
    fully = [records[i] for i in range(n) if i in keep]
    weakly = [strip_to_weak(records[i]) for i in range(n) if i not in keep]
    return SplitDataset(fully=fully, weakly=weakly, protocol=f"partial({ratio:g})")


# ---------------------------------------------------------------------------
# CAM pseudo-labels for records (the image-class filter lives here)

def cam_detections(
    record: AnnotationRecord,
    tau: float = 0.5,
    min_area: int = 4,
    max_area: int | None = None,
    connectivity: int = 8,
) -> list[Detection]:
    """Heatmap-derived boxes for one record; class-0 images yield nothing."""
    if record.label != 1 or record.heatmap is None:
        return []
    if max_area is None:
        max_area = int(record.image_h * record.image_w) // 4
    return cam_to_boxes(
        record.heatmap,
        tau=tau,
        score=record.cam_score,
        min_area=min_area,
        max_area=max_area,
        connectivity=connectivity,
    )


# ---------------------------------------------------------------------------
# manifest I/O

def save_manifest(out_dir, records: list[AnnotationRecord], protocol: str = "full") -> str:
    """Write manifest.json plus per-record binary payloads under out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    payload_dir = os.path.join(out_dir, "payloads")
    os.makedirs(payload_dir, exist_ok=True)
    entries = []
    for rec in records:
        feat_rel = f"payloads/{rec.image_id}.features.bin"
        save_array(rec.features, os.path.join(out_dir, feat_rel))
        heat_rel = None
        if rec.heatmap is not None:
            heat_rel = f"payloads/{rec.image_id}.heatmap.bin"
            save_array(rec.heatmap, os.path.join(out_dir, heat_rel))
        entries.append(
            {
                "image_id": rec.image_id,
                "kind": rec.kind,
                "label": rec.label,
                "boxes": [d.box.to_list() for d in rec.boxes],
                "cam_score": rec.cam_score,
                "image_h": rec.image_h,
                "image_w": rec.image_w,
                "features": feat_rel,
                "heatmap": heat_rel,
                "auxiliary_image_id": rec.auxiliary_image_id,
            }
        )
    manifest = {"format": "wsdet-dataset", "protocol": protocol, "records": entries}
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def load_manifest(path) -> tuple[list[AnnotationRecord], str]:
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("format") != "wsdet-dataset":
        raise ValueError("not a wsdet dataset manifest")
    records = []
    for e in manifest["records"]:
        boxes = [
            Detection(1.0, BoundingBox.from_list(b), "ground-truth") for b in e["boxes"]
        ]
        heatmap = None
        if e.get("heatmap"):
            heatmap = load_array(os.path.join(base, e["heatmap"]))
        records.append(
            AnnotationRecord(
                image_id=e["image_id"],
                kind=e["kind"],
                boxes=boxes,
                label=int(e["label"]),
                features=load_array(os.path.join(base, e["features"])),
                heatmap=heatmap,
                cam_score=float(e["cam_score"]),
                image_h=int(e["image_h"]),
                image_w=int(e["image_w"]),
                auxiliary_image_id=e.get("auxiliary_image_id"),
            )
        )
    return records, manifest.get("protocol", "full")


def as_split(records: list[AnnotationRecord], protocol: str = "full") -> SplitDataset:
    fully = [r for r in records if r.kind == "full"]
    weakly = [r for r in records if r.kind == "weak"]
    return SplitDataset(fully=fully, weakly=weakly, protocol=protocol)
