"""Attention-map visualization and localization scoring.

Pipeline: upsample map to image size -> keep top 5% pixels -> trace the
mask boundary -> draw it in green over the image as a binary PPM.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from .errors import ContractError, DimensionError
from .interp import resize_bilinear

GREEN = (0, 255, 0)


@dataclass
class ContourSet:
    # each polyline is a closed list of (row, col) corner points on the
    # half-integer grid; first point repeated at the end
    polylines: List[List[Tuple[float, float]]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.polylines)

    def total_length(self) -> int:
        return sum(len(p) - 1 for p in self.polylines)


def upsample_bilinear(amap: np.ndarray, target: Tuple[int, int]) -> np.ndarray:
    """N x 1 x h x w -> N x 1 x H x W, half-pixel centers, edge-clamped."""
    amap = np.asarray(amap)
    h, w = amap.shape[-2:]
    height, width = target
    if height < h or width < w:
        raise ContractError(f"upsample_bilinear: target {target} is smaller than source {(h, w)}")
    return resize_bilinear(amap, height, width)


def top_k_count(fraction: float, n_pixels: int) -> int:
    # round first so e.g. 0.07 * 100 = 7.000000000000001 does not bump k
    return math.ceil(round(fraction * n_pixels, 9))


def top_fraction_mask(amap: np.ndarray, fraction: float) -> np.ndarray:
    """Binary mask of the ceil(fraction * H * W) highest pixels.

    Ties go to the lower row-major index.
    """
    if not 0 < fraction <= 1:
        raise ContractError(f"fraction must be in (0, 1], got {fraction}")
    amap = np.asarray(amap)
    if amap.ndim != 2:
        raise DimensionError(f"top_fraction_mask expects an H x W map, got {amap.shape}")
    k = top_k_count(fraction, amap.size)
    order = np.argsort(-amap.reshape(-1), kind="stable")
    mask = np.zeros(amap.size, dtype=np.uint8)
    mask[order[:k]] = 1
    return mask.reshape(amap.shape)


# direction (drow, dcol) -> preference order for the next step; right turn,
# straight, left turn relative to the boundary orientation below
_TURNS = {
    (0, 1): [(1, 0), (0, 1), (-1, 0)],
    (1, 0): [(0, -1), (1, 0), (0, 1)],
    (0, -1): [(-1, 0), (0, -1), (1, 0)],
    (-1, 0): [(0, 1), (-1, 0), (0, -1)],
}


def boundary_edges(mask: np.ndarray) -> List[Tuple[Tuple[int, int], Tuple[int, int]]]:
    """Directed unit edges between foreground and background/border.

    Corners use integer lattice coordinates (pixel (r, c) spans corners
    (r, c)..(r+1, c+1)); edges run clockwise so the foreground is on the
    right-hand side when walking in screen coordinates.
    """
    m = np.pad(np.asarray(mask, dtype=bool), 1)
    fg = m[1:-1, 1:-1]
    edges = []
    for r, c in zip(*np.nonzero(fg & ~m[:-2, 1:-1])):
        edges.append(((r, c), (r, c + 1)))
    for r, c in zip(*np.nonzero(fg & ~m[1:-1, 2:])):
        edges.append(((r, c + 1), (r + 1, c + 1)))
    for r, c in zip(*np.nonzero(fg & ~m[2:, 1:-1])):
        edges.append(((r + 1, c + 1), (r + 1, c)))
    for r, c in zip(*np.nonzero(fg & ~m[1:-1, :-2])):
        edges.append(((r + 1, c), (r, c)))
    return [((int(a[0]), int(a[1])), (int(b[0]), int(b[1]))) for a, b in edges]


def trace_contours(mask: np.ndarray) -> ContourSet:
    """Chain boundary edges into closed axis-aligned polylines."""
    edges = boundary_edges(mask)
    outgoing: Dict[Tuple[int, int], List[Tuple[int, int]]] = {}
    for a, b in edges:
        outgoing.setdefault(a, []).append(b)
    unused = set(edges)
    polylines = []
    for start_edge in sorted(edges):
        if start_edge not in unused:
            continue
        unused.discard(start_edge)
        start, cur = start_edge
        path = [start, cur]
        d = (cur[0] - start[0], cur[1] - start[1])
        while cur != start:
            for turn in _TURNS[d]:
                nxt = (cur[0] + turn[0], cur[1] + turn[1])
                if (cur, nxt) in unused:
                    break
            else:  # pragma: no cover - in/out degrees always balance
                raise ContractError("open boundary while tracing contour")
            unused.discard((cur, nxt))
            d = turn
            cur = nxt
            path.append(cur)
        polylines.append([(r - 0.5, c - 0.5) for r, c in path])
    return ContourSet(polylines)


def contour_pixels(contours: ContourSet, shape: Tuple[int, int]) -> np.ndarray:
    """Foreground pixels that touch a contour segment."""
    out = np.zeros(shape, dtype=bool)
    for poly in contours.polylines:
        for (r0, c0), (r1, c1) in zip(poly[:-1], poly[1:]):
            r0, c0, r1, c1 = (int(round(v + 0.5)) for v in (r0, c0, r1, c1))
            if r1 == r0:
                r, c = (r0, min(c0, c1)) if c1 > c0 else (r0 - 1, min(c0, c1))
            else:
                r, c = (min(r0, r1), c0 - 1) if r1 > r0 else (min(r0, r1), c0)
            if 0 <= r < shape[0] and 0 <= c < shape[1]:
                out[r, c] = True
    return out


def to_uint8(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.min() < 0 or image.max() > 1:
        raise ContractError("overlay image values must lie in [0, 1]")
    return np.rint(255 * image).astype(np.uint8)


def render_overlay(image: np.ndarray, contours: ContourSet) -> np.ndarray:
    """3 x S x S image in [0,1] -> S x S x 3 uint8 with green contour pixels."""
    rgb = to_uint8(image).transpose(1, 2, 0).copy()
    rgb[contour_pixels(contours, rgb.shape[:2])] = GREEN
    return rgb


def write_ppm(path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())
    os.replace(tmp, path)


def overlay_write(image: np.ndarray, contours: ContourSet, path) -> None:
    write_ppm(path, render_overlay(image, contours))


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ContractError(f"{path}: not a binary PPM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)


def pointing_game(amap: np.ndarray, gt: np.ndarray) -> bool:
    amap, gt = np.asarray(amap), np.asarray(gt)
    if amap.shape != gt.shape:
        raise DimensionError(f"pointing_game: map {amap.shape} vs mask {gt.shape}")
    return bool(gt.reshape(-1)[int(np.argmax(amap.reshape(-1)))])


def attention_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"attention_iou: {pred.shape} vs {gt.shape}")
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 0.0
    return np.count_nonzero(pred & gt) / union


def localization_scores(maps: np.ndarray, masks: np.ndarray, fraction: float = 0.05) -> Dict[str, np.ndarray]:
    """Per-sample pointing hits and top-fraction IoU for N x 1 x h x w maps."""
    s = masks.shape[-1]
    up = upsample_bilinear(maps, (s, s))[:, 0]
    hits = np.array([pointing_game(u, g) for u, g in zip(up, masks)])
    ious = np.array([attention_iou(top_fraction_mask(u, fraction), g) for u, g in zip(up, masks)])
    return {"hit": hits, "iou": ious}
