import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # make oracles importable

from wsdet.fusion import Detection
from wsdet.geometry import BoundingBox


def random_box(rng, lo: float = 0.0, hi: float = 60.0, max_side: float = 30.0) -> BoundingBox:
    x0 = rng.uniform(lo, hi)
    y0 = rng.uniform(lo, hi)
    return BoundingBox(x0, y0, x0 + rng.uniform(0.5, max_side), y0 + rng.uniform(0.5, max_side))


def random_int_box(rng, size: int = 64) -> BoundingBox:
    x0 = int(rng.integers(0, size - 1))
    y0 = int(rng.integers(0, size - 1))
    x1 = int(rng.integers(x0 + 1, size + 1))
    y1 = int(rng.integers(y0 + 1, size + 1))
    return BoundingBox(float(x0), float(y0), float(x1), float(y1))


def random_detections(rng, n: int, source: str = "teacher", tied_scores: bool = False):
    dets = []
    for _ in range(n):
        score = float(rng.uniform(0, 1))
        if tied_scores:
            score = round(score, 1)
        dets.append(Detection(score, random_box(rng), source))
    return dets


def random_eval_set(rng, n_images: int = 3, max_gt: int = 3, max_det: int = 7,
                    tied_scores: bool = False):
    """Returns (EvalSet, plain-tuple mirror for the oracles)."""
    from wsdet.metrics import EvalSet

    ev = EvalSet()
    mirror = {}
    for i in range(n_images):
        image_id = f"im{i:03d}"
        gts = [random_box(rng) for _ in range(int(rng.integers(0, max_gt + 1)))]
        ev.add_image(image_id, gts)
        dets = random_detections(rng, int(rng.integers(0, max_det + 1)),
                                 tied_scores=tied_scores)
        for d in dets:
            ev.add_detection(image_id, d)
        mirror[image_id] = (
            [(b.x0, b.y0, b.x1, b.y1) for b in gts],
            [(d.score, (d.box.x0, d.box.y0, d.box.x1, d.box.y1)) for d in dets],
        )
    return ev, mirror


def separated_eval_set(rng, n_images: int = 3, max_gt: int = 3, max_det: int = 7):
    """EvalSet whose ground truths are spaced so widely (10x10 boxes on a
    70-pixel lattice) that no single detection can reach IoU 0.2 with two of
    them, the regime where a duplicated detection is always a false
    positive."""
    from wsdet.metrics import EvalSet

    ev = EvalSet()
    for i in range(n_images):
        image_id = f"im{i:03d}"
        cells = rng.permutation(9)[: int(rng.integers(0, max_gt + 1))]
        gts = [
            BoundingBox(20 + 70 * (c % 3), 20 + 70 * (c // 3),
                        30 + 70 * (c % 3), 30 + 70 * (c // 3))
            for c in cells
        ]
        ev.add_image(image_id, gts)
        for _ in range(int(rng.integers(0, max_det + 1))):
            x0 = rng.uniform(0, 200)
            y0 = rng.uniform(0, 200)
            box = BoundingBox(x0, y0, x0 + rng.uniform(2, 40), y0 + rng.uniform(2, 40))
            ev.add_detection(image_id, Detection(float(rng.uniform(0, 1)), box))
    return ev


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
