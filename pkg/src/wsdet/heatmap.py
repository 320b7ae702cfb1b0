"""Class-activation heatmap post-processing: threshold, label, gate, box.

A heatmap is a dense (H, W) float array with values in [0, 1], already
resampled to full image resolution by whatever produced it. The pipeline
turns one heatmap into pseudo-label detections:

    binarize -> connected components -> area gates -> tight boxes

Area gates apply to the component *pixel count*, not the bounding-box
area, and both comparisons are strict: a component is dropped when its
pixel count is < min_area or > max_area, so a count exactly equal to a
gate survives.

Heatmap files are a one-line JSON header {"width": W, "height": H}
followed by little-endian float32 payload in row-major order. 3-D feature
grids reuse the same container with an extra "channels" key.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .fusion import Detection
from .geometry import BoundingBox

DEFAULT_TAU = 0.5
DEFAULT_MIN_AREA = 32 * 32
DEFAULT_MAX_AREA = 1024 * 1024


def validate_heatmap(values: np.ndarray) -> np.ndarray:
    """Check shape and value range, returning a float64 view/copy."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"heatmap must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("heatmap contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(
            f"heatmap values must lie in [0, 1], got range "
            f"[{arr.min():.6g}, {arr.max():.6g}]"
        )
    return arr


def binarize(values: np.ndarray, tau: float) -> np.ndarray:
    """Keep activations strictly above tau, zero the rest.

    The surviving pixels retain their original values (masking, not
    thresholding to 1), so the operation is idempotent.
    """
    if not (0.0 < tau < 1.0):
        raise ValueError(f"binarization threshold must lie in (0, 1), got {tau}")
    arr = validate_heatmap(values)
    return np.where(arr > tau, arr, 0.0)


@dataclass
class ComponentMask:
    """One connected component of a binarized heatmap.

    pixels is an (N, 2) int array of (y, x) lattice coordinates in raster
    order; pixel_area == N.
    """

    pixels: np.ndarray
    pixel_area: int = field(init=False)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.int64).reshape(-1, 2)
        if len(self.pixels) == 0:
            raise ValueError("component must be non-empty")
        self.pixel_area = int(len(self.pixels))

    def pixel_set(self) -> frozenset:
        return frozenset(map(tuple, self.pixels.tolist()))

    def bounding_box(self) -> BoundingBox:
        """Tight half-open box around the component's pixels."""
        y0, x0 = self.pixels.min(axis=0)
        y1, x1 = self.pixels.max(axis=0)
        return BoundingBox(float(x0), float(y0), float(x1 + 1), float(y1 + 1))


def _neighbor_offsets(connectivity: int):
    if connectivity == 4:
        return [(0, 1), (1, 0)]
    if connectivity == 8:
        return [(0, 1), (1, 0), (1, 1), (1, -1)]
    raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")


def connected_components(values: np.ndarray, connectivity: int = 8) -> list[ComponentMask]:
    """Partition the non-zero pixels into maximal connected components.

    Union-find over lattice adjacency edges; each forward neighbor offset
    is extracted with vectorized slicing so only genuine edges are walked.
    Components are returned ordered by the raster position (min-y, min-x)
    of their first pixel, which makes downstream pseudo-label files
    byte-reproducible.
    """
    offsets = _neighbor_offsets(connectivity)
    arr = validate_heatmap(values)
    h, w = arr.shape
    mask = arr > 0.0
    n = int(mask.sum())
    if n == 0:
        return []

    flat = np.flatnonzero(mask.ravel())
    compact = np.full(h * w, -1, dtype=np.int64)
    compact[flat] = np.arange(n)

    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]  # path halving
            i = parent[i]
        return i

    for dy, dx in offsets:
        hh, ww = h - dy, w - abs(dx)
        if hh <= 0 or ww <= 0:
            continue
        if dx >= 0:
            a, b = mask[:hh, :ww], mask[dy:, dx:]
        else:
            a, b = mask[:hh, -dx:], mask[dy:, :ww]
        base = np.flatnonzero(a & b)
        rows, cols = np.divmod(base, ww)
        x_src = cols if dx >= 0 else cols - dx
        src = compact[rows * w + x_src]
        dst = compact[(rows + dy) * w + (x_src + dx)]
        for i, j in zip(src.tolist(), dst.tolist()):
            ri, rj = find(i), find(j)
            if ri != rj:
                parent[rj] = ri

    roots = np.fromiter((find(i) for i in range(n)), dtype=np.int64, count=n)
    order = np.argsort(roots, kind="stable")  # raster order preserved within groups
    boundaries = np.flatnonzero(np.diff(roots[order])) + 1
    groups = np.split(flat[order], boundaries)

    comps = []
    for g in groups:
        gy, gx = np.divmod(g, w)
        comps.append(ComponentMask(np.stack([gy, gx], axis=1)))
    comps.sort(key=lambda c: (int(c.pixels[:, 0].min()), int(c.pixels[:, 1].min())))
    return comps


def cam_to_boxes(
    values: np.ndarray,
    tau: float = DEFAULT_TAU,
    score: float = 0.5,
    min_area: int = DEFAULT_MIN_AREA,
    max_area: int = DEFAULT_MAX_AREA,
    connectivity: int = 8,
) -> list[Detection]:
    """Full heatmap-to-pseudo-box conversion.

    Every surviving component yields one Detection carrying the supplied
    confidence score (typically the image-level classifier confidence) and
    the tight bounding box of the component. Components touching image
    borders are kept; only the pixel-count gates filter.
    """
    if min_area >= max_area:
        raise ValueError(f"min_area ({min_area}) must be < max_area ({max_area})")
    if not (0.0 <= score <= 1.0):
        raise ValueError(f"score must lie in [0, 1], got {score}")
    binary = binarize(values, tau)
    out = []
    for comp in connected_components(binary, connectivity=connectivity):
        if comp.pixel_area < min_area or comp.pixel_area > max_area:
            continue
        out.append(Detection(score=score, box=comp.bounding_box(), source="cam"))
    return out


# ---------------------------------------------------------------------------
# binary container (shared by heatmaps, feature grids and checkpoints' payloads)

def save_array(arr: np.ndarray, path) -> None:
    """Write header line + little-endian float32 payload, row-major."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        header = {"width": int(arr.shape[1]), "height": int(arr.shape[0])}
    elif arr.ndim == 3:
        header = {
            "width": int(arr.shape[1]),
            "height": int(arr.shape[0]),
            "channels": int(arr.shape[2]),
        }
    else:
        raise ValueError(f"only 2-D or 3-D arrays are supported, got ndim={arr.ndim}")
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode("ascii") + b"\n")
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_array(path) -> np.ndarray:
    """Inverse of save_array; raises ValueError naming the defect on bad input."""
    with open(path, "rb") as f:
        line = f.readline()
        try:
            header = json.loads(line.decode("ascii"))
            height = int(header["height"])
            width = int(header["width"])
            channels = int(header.get("channels", 0))
        except (ValueError, KeyError, UnicodeDecodeError) as exc:
            raise ValueError(f"malformed header line: {exc}") from exc
        if height < 1 or width < 1:
            raise ValueError(f"invalid dimensions {width}x{height} in header")
        count = height * width * (channels if channels else 1)
        payload = f.read(count * 4 + 4)  # read one extra word to detect trailing junk
    if len(payload) < count * 4:
        raise ValueError(
            f"truncated payload: expected {count * 4} bytes, got {len(payload)}"
        )
    if len(payload) > count * 4:
        raise ValueError("payload longer than header dimensions describe")
    data = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    if channels:
        return data.reshape(height, width, channels)
    return data.reshape(height, width)


def save_heatmap(values: np.ndarray, path) -> None:
    save_array(validate_heatmap(values), path)


def load_heatmap(path) -> np.ndarray:
    arr = load_array(path)
    if arr.ndim != 2:
        raise ValueError("heatmap file must be single-channel")
    return validate_heatmap(arr)


def load_pgm(path) -> np.ndarray:
    """Read an 8-bit PGM (binary P5 or ascii P2) heatmap, scaled by 1/255."""
    with open(path, "rb") as f:
        raw = f.read()
    try:
        magic = raw[:2].decode("ascii")
    except UnicodeDecodeError:
        raise ValueError("not a PGM file") from None
    if magic not in ("P5", "P2"):
        raise ValueError(f"unsupported PGM magic {magic!r} (need P2 or P5)")

    # header tokens: magic, width, height, maxval; '#' comments run to end of line
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        tokens.append(raw[start:pos])
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise ValueError("non-numeric PGM header fields") from None
    if maxval < 1 or maxval > 255:
        raise ValueError(f"only 8-bit PGM supported, got maxval {maxval}")
    if width < 1 or height < 1:
        raise ValueError(f"invalid PGM dimensions {width}x{height}")

    if magic == "P5":
        pos += 1  # single whitespace byte after maxval
        payload = raw[pos : pos + width * height]
        if len(payload) < width * height:
            raise ValueError("truncated PGM payload")
        data = np.frombuffer(payload, dtype=np.uint8).astype(np.float64)
    else:
        values = raw[pos:].split()
        if len(values) < width * height:
            raise ValueError("truncated PGM payload")
        data = np.array([int(v) for v in values[: width * height]], dtype=np.float64)
    if data.max(initial=0) > 255:
        raise ValueError("PGM sample exceeds 8-bit range")
    return (data / 255.0).reshape(height, width)
