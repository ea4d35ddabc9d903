"""Polygon primitives on the pixel lattice.

Polygons are ``(N, 2)`` float arrays of ``(x, y)`` vertices forming an
open ring (the closing edge back to the first vertex is implicit) with
positive shoelace area. Contours traced from masks follow pixel edges, so
with pixel centers at integer coordinates their vertices sit on the
half-integer lattice and the shoelace area equals the pixel count of the
(hole-filled) mask exactly.
"""

from __future__ import annotations

import numpy as np


def shoelace_area(vertices: np.ndarray) -> float:
    """Signed shoelace area; positive for the package's CCW convention."""
    v = np.asarray(vertices, dtype=np.float64)
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def polygon_perimeter(vertices: np.ndarray) -> float:
    v = np.asarray(vertices, dtype=np.float64)
    d = np.roll(v, -1, axis=0) - v
    return float(np.sum(np.hypot(d[:, 0], d[:, 1])))


def polygon_centroid(vertices: np.ndarray) -> tuple[float, float]:
    """Area-weighted centroid (falls back to vertex mean for zero area)."""
    v = np.asarray(vertices, dtype=np.float64)
    x, y = v[:, 0], v[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    a = 0.5 * np.sum(cross)
    if abs(a) < 1e-12:
        return (float(x.mean()), float(y.mean()))
    cx = float(np.sum((x + xn) * cross) / (6.0 * a))
    cy = float(np.sum((y + yn) * cross) / (6.0 * a))
    return (cx, cy)


def polygon_bbox(vertices: np.ndarray) -> tuple[float, float, float, float]:
    v = np.asarray(vertices, dtype=np.float64)
    return (float(v[:, 0].min()), float(v[:, 1].min()), float(v[:, 0].max()), float(v[:, 1].max()))


def point_in_polygon(x: float, y: float, vertices: np.ndarray) -> bool:
    """Even-odd containment test (points on an edge are implementation-defined)."""
    v = np.asarray(vertices, dtype=np.float64)
    x1, y1 = v[:, 0], v[:, 1]
    x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
    crosses = (y1 > y) != (y2 > y)
    if not crosses.any():
        return False
    with np.errstate(divide="ignore", invalid="ignore"):
        xs = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
    return bool(np.sum(xs[crosses] > x) % 2)


def _merge_collinear(vertices: list[tuple[float, float]]) -> np.ndarray:
    out = []
    n = len(vertices)
    for i in range(n):
        px, py = vertices[i - 1]
        cx, cy = vertices[i]
        nx, ny = vertices[(i + 1) % n]
        cross = (cx - px) * (ny - cy) - (cy - py) * (nx - cx)
        if cross != 0:
            out.append((cx, cy))
    return np.asarray(out, dtype=np.float64)


def trace_boundary(mask: np.ndarray) -> np.ndarray:
    """Exterior contour of a hole-free 4-connected boolean mask.

    Walks directed pixel edges keeping the interior on the left, which
    yields a simple ring with positive shoelace area equal to the pixel
    count. Vertices are on the half-integer lattice of the mask's own
    coordinate frame (pixel centers at integers); collinear runs are
    merged. Holes must be filled and diagonal-only touches resolved
    beforehand (both are guaranteed for hole-filled 4-connected masks).
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("cannot trace an empty mask")
    h, w = mask.shape
    padded = np.zeros((h + 2, w + 2), dtype=bool)
    padded[1:-1, 1:-1] = mask

    # Directed edges keyed by start corner (corner (i, j) = point (j-0.5, i-0.5)
    # in the unpadded frame). Orientation: interior on the left of travel.
    top = padded[1:-1, 1:-1] & ~padded[:-2, 1:-1]
    right = padded[1:-1, 1:-1] & ~padded[1:-1, 2:]
    bottom = padded[1:-1, 1:-1] & ~padded[2:, 1:-1]
    left = padded[1:-1, 1:-1] & ~padded[1:-1, :-2]

    nxt: dict[tuple[int, int], tuple[int, int]] = {}
    for r, c in zip(*np.nonzero(top)):
        nxt[(r, c)] = (r, c + 1)
    for r, c in zip(*np.nonzero(right)):
        nxt[(r, c + 1)] = (r + 1, c + 1)
    for r, c in zip(*np.nonzero(bottom)):
        nxt[(r + 1, c + 1)] = (r + 1, c)
    for r, c in zip(*np.nonzero(left)):
        nxt[(r + 1, c)] = (r, c)

    start = min(nxt)
    ring = [start]
    cur = nxt[start]
    while cur != start:
        ring.append(cur)
        cur = nxt[cur]
    points = [(c - 0.5, r - 0.5) for r, c in ring]
    return _merge_collinear(points)


def translate(vertices: np.ndarray, dx: float, dy: float) -> np.ndarray:
    return np.asarray(vertices, dtype=np.float64) + np.array([dx, dy], dtype=np.float64)


def rasterize_polygon(vertices: np.ndarray, origin: tuple[float, float], shape: tuple[int, int]) -> np.ndarray:
    """Fill a boolean raster whose pixel (i, j) center is ``origin + (j, i)``.

    Even-odd scanline fill evaluated at pixel centers. Exact for lattice
    contours from :func:`trace_boundary` (centers never fall on edges);
    the inverse of tracing up to hole filling.
    """
    v = np.asarray(vertices, dtype=np.float64)
    ox, oy = origin
    h, w = shape
    out = np.zeros((h, w), dtype=bool)
    x1, y1 = v[:, 0] - ox, v[:, 1] - oy
    x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
    keep = y1 != y2
    x1, y1, x2, y2 = x1[keep], y1[keep], x2[keep], y2[keep]
    if x1.size == 0:
        return out
    for i in range(h):
        y = float(i)
        crosses = (y1 > y) != (y2 > y)
        if not crosses.any():
            continue
        xs = np.sort(x1[crosses] + (y - y1[crosses]) * (x2[crosses] - x1[crosses]) / (y2[crosses] - y1[crosses]))
        for a, b in zip(xs[0::2], xs[1::2]):
            # half-open span [a, b): centers exactly on the right crossing excluded
            lo = max(0, int(np.ceil(a)))
            hi = min(w - 1, int(np.floor(b)) - 1 if b == np.floor(b) else int(np.floor(b)))
            if hi >= lo:
                out[i, lo : hi + 1] = True
    return out


def polygon_raster_iou(a: np.ndarray, b: np.ndarray) -> float:
    """IoU of two polygons rasterized on their joint bounding-box grid."""
    ax0, ay0, ax1, ay1 = polygon_bbox(a)
    bx0, by0, bx1, by1 = polygon_bbox(b)
    if ax1 < bx0 or bx1 < ax0 or ay1 < by0 or by1 < ay0:
        return 0.0
    x0 = np.floor(min(ax0, bx0))
    y0 = np.floor(min(ay0, by0))
    x1 = np.ceil(max(ax1, bx1))
    y1 = np.ceil(max(ay1, by1))
    shape = (int(y1 - y0) + 1, int(x1 - x0) + 1)
    ra = rasterize_polygon(a, (x0, y0), shape)
    rb = rasterize_polygon(b, (x0, y0), shape)
    inter = int(np.sum(ra & rb))
    union = int(np.sum(ra | rb))
    return inter / union if union else 0.0
