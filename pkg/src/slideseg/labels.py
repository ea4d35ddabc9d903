"""Label-map helpers shared by supervision, extraction and metrics.

A label map is a 2-D integer array of non-negative instance ids where 0 is
background. Ids need not be contiguous; well-formed maps label a single
4-connected region per id (use :func:`relabel_connected` to enforce this).
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


def as_label_map(labels) -> np.ndarray:
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise ValueError(f"label map must be 2-D, got shape {arr.shape}")
    if arr.size and arr.min() < 0:
        raise ValueError("label map must be non-negative")
    return arr


def instance_ids(labels: np.ndarray) -> np.ndarray:
    """Nonzero ids in ascending order."""
    ids = np.unique(labels)
    return ids[ids > 0]


def relabel_connected(labels) -> np.ndarray:
    """Split ids spanning multiple 4-connected regions and renumber.

    Output ids are contiguous from 1, ordered by the raster-scan position
    of each region's first pixel.
    """
    labels = as_label_map(labels)
    tmp = np.zeros(labels.shape, dtype=np.int64)
    offset = 0
    for obj_id, sl, mask in iter_instances(labels):
        comps, n = ndimage.label(mask, structure=FOUR_CONNECTED)
        region = tmp[sl]
        region[mask] = comps[mask] + offset
        offset += n
    return relabel_sequential(tmp)


def relabel_sequential(labels) -> np.ndarray:
    """Renumber ids contiguously from 1 by raster order of first occurrence."""
    labels = as_label_map(labels)
    out = np.zeros(labels.shape, dtype=np.uint32)
    flat = labels.ravel()
    nz = np.flatnonzero(flat)
    if nz.size == 0:
        return out
    ids, first = np.unique(flat[nz], return_index=True)
    order = np.argsort(first, kind="stable")
    mapping = np.zeros(int(labels.max()) + 1, dtype=np.uint32)
    mapping[ids[order]] = np.arange(1, len(ids) + 1, dtype=np.uint32)
    out = mapping[labels]
    return out


def _iter_objects(labels: np.ndarray):
    """Yield (id, bounding slice) per instance, ascending by id."""
    if labels.size == 0 or labels.max() == 0:
        return
    slices = ndimage.find_objects(labels)
    for idx, sl in enumerate(slices, start=1):
        if sl is not None:
            yield idx, sl


def iter_instances(labels: np.ndarray):
    """Yield (id, bounding slice, boolean mask within the slice) per instance."""
    labels = as_label_map(labels)
    if labels.size and labels.dtype.kind not in "iu":
        labels = labels.astype(np.int64)
    for obj_id, sl in _iter_objects(labels):
        yield obj_id, sl, labels[sl] == obj_id


def instance_areas(labels: np.ndarray) -> dict[int, int]:
    ids, counts = np.unique(labels[labels > 0], return_counts=True)
    return {int(i): int(c) for i, c in zip(ids, counts)}


def remove_small(labels: np.ndarray, min_px: int) -> np.ndarray:
    """Zero out instances with fewer than ``min_px`` pixels."""
    if min_px <= 1 or labels.size == 0 or labels.max() == 0:
        return labels
    counts = np.bincount(labels.ravel())
    kill = np.flatnonzero(counts < min_px)
    if kill.size:
        drop = np.isin(labels, kill[kill > 0])
        labels = labels.copy()
        labels[drop] = 0
    return labels


def overlap_pairs(a: np.ndarray, b: np.ndarray) -> dict[tuple[int, int], int]:
    """Pixel-count contingency of co-occurring nonzero ids of two maps."""
    a = as_label_map(a)
    b = as_label_map(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    both = (a > 0) & (b > 0)
    if not both.any():
        return {}
    av = a[both].astype(np.int64)
    bv = b[both].astype(np.int64)
    codes = av * (int(b.max()) + 1) + bv
    uniq, counts = np.unique(codes, return_counts=True)
    base = int(b.max()) + 1
    return {(int(c // base), int(c % base)): int(n) for c, n in zip(uniq, counts)}
