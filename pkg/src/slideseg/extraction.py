"""Instance extraction from dense predictions.

Nuclei come from a marker-controlled watershed over an energy landscape
built from the HV offset-field derivatives; whole cells from a second
watershed seeded by the nucleus labels (one cell per nucleus); cell blobs
without any nucleus are recovered from distance-transform maxima.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from skimage.feature import peak_local_max
from skimage.segmentation import watershed

from . import polygons
from .hv import hv_gradients
from .labels import FOUR_CONNECTED, as_label_map, instance_ids, relabel_sequential, remove_small

HEADS = ("he_nuclei", "he_cells", "mif_nuclei", "mif_cells")


@dataclass(frozen=True)
class ExtractionParams:
    """Post-processing constants (all configurable, logged in provenance)."""

    prob_threshold: float = 0.5
    grad_threshold: float = 0.4
    min_marker_px: int = 10
    min_instance_px: int = 10
    min_anucleate_px: int = 30
    seed_min_distance_px: int = 10

    def __post_init__(self):
        if not 0 < self.prob_threshold < 1:
            raise ValueError(f"prob_threshold must be in (0,1), got {self.prob_threshold}")
        if not 0 < self.grad_threshold < 1:
            raise ValueError(f"grad_threshold must be in (0,1), got {self.grad_threshold}")
        for name in ("min_marker_px", "min_instance_px", "min_anucleate_px", "seed_min_distance_px"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class DensePrediction:
    """Per-head dense output: foreground probability plus HV offset field."""

    head: str
    seg_prob: np.ndarray
    hv: np.ndarray

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        self.seg_prob = np.asarray(self.seg_prob, dtype=np.float32)
        self.hv = np.asarray(self.hv, dtype=np.float32)
        if self.hv.shape != self.seg_prob.shape + (2,):
            raise ValueError(f"hv shape {self.hv.shape} does not match seg_prob {self.seg_prob.shape}")


def hv_energy(hv: np.ndarray, foreground: np.ndarray) -> np.ndarray:
    """Boundary-strength landscape from HV derivatives, min-max scaled on fg.

    HV targets ramp upward along each axis inside an instance, so interior
    derivatives are positive while instance boundaries and contact
    interfaces are negative-going drops; the ridge energy keeps only the
    negative-going component, max(-dh/dx, -dv/dy, 0). That leaves
    interiors of any instance size near zero and contact ridges at twice
    the background-transition strength. Normalization uses foreground
    statistics only; a flat foreground normalizes to zeros.
    """
    dh, dv = hv_gradients(hv)
    s = np.maximum(np.maximum(-dh, -dv), 0.0)
    fg = np.asarray(foreground, dtype=bool)
    if not fg.any():
        return np.zeros_like(s)
    lo = float(s[fg].min())
    hi = float(s[fg].max())
    if hi <= lo:
        return np.zeros_like(s)
    return (s - lo) / (hi - lo)


def _rescue_seeds(markers: np.ndarray, fg: np.ndarray, min_distance: int) -> np.ndarray:
    """Seed foreground components that lost every marker to the gradient gate.

    Small instances can sit entirely inside the boundary band; a distance
    transform peak per lobe recovers one seed each, so such components
    still segment instead of vanishing.
    """
    fg_cc, ncc = ndimage.label(fg, structure=FOUR_CONNECTED)
    if ncc == 0:
        return markers
    has_marker = np.zeros(ncc + 1, dtype=bool)
    has_marker[np.unique(fg_cc[markers > 0])] = True
    if has_marker[1:].all():
        return markers
    next_id = int(markers.max()) + 1
    for cc_id, sl in enumerate(ndimage.find_objects(fg_cc), start=1):
        if has_marker[cc_id] or sl is None:
            continue
        mask = fg_cc[sl] == cc_id
        dist = ndimage.distance_transform_edt(np.pad(mask, 1))[1:-1, 1:-1]
        peaks = peak_local_max(dist, min_distance=min_distance, exclude_border=False, labels=mask.astype(np.uint8))
        if len(peaks) == 0:
            flat = np.flatnonzero(mask)
            peaks = [(flat[0] // mask.shape[1], flat[0] % mask.shape[1])]
        sub = markers[sl]
        for r, c in peaks:
            sub[r, c] = next_id
            next_id += 1
    return markers


def extract_instances_hv(pred: DensePrediction, params: ExtractionParams = ExtractionParams()) -> np.ndarray:
    """Labeled instances from one head's probability map and HV field.

    Markers are low-gradient foreground components; the watershed floods
    -(1 - energy) inside the foreground. Output ids are contiguous from 1
    in raster order of first occurrence.
    """
    fg = pred.seg_prob >= params.prob_threshold
    if not fg.any():
        return np.zeros(fg.shape, dtype=np.uint32)
    energy = hv_energy(pred.hv, fg)
    markers_mask = fg & (energy <= params.grad_threshold)
    markers, _ = ndimage.label(markers_mask, structure=FOUR_CONNECTED)
    markers = remove_small(markers, params.min_marker_px)
    markers = _rescue_seeds(markers, fg, max(2, params.seed_min_distance_px // 2))
    if markers.max() == 0:
        return np.zeros(fg.shape, dtype=np.uint32)
    elevation = -(1.0 - energy)
    segmented = watershed(elevation, markers=markers, mask=fg, connectivity=1)
    segmented = remove_small(segmented, params.min_instance_px)
    return relabel_sequential(segmented)


def extract_cells_constrained(
    cell_pred: DensePrediction,
    nuclei: np.ndarray,
    params: ExtractionParams = ExtractionParams(),
) -> np.ndarray:
    """Whole-cell labels seeded by nucleus labels (one cell per nucleus).

    Nucleus pixels inside the cell foreground are fixed markers, so every
    output cell keeps its seeding nucleus id. A nucleus with no foreground
    overlap becomes a degenerate cell equal to its own mask, keeping the
    nucleus -> cell map total.
    """
    nuclei = as_label_map(nuclei)
    if nuclei.shape != cell_pred.seg_prob.shape:
        raise ValueError(f"shape mismatch: nuclei {nuclei.shape} vs cells {cell_pred.seg_prob.shape}")
    cell_fg = cell_pred.seg_prob >= params.prob_threshold
    markers = np.where(cell_fg, nuclei, 0)

    out = np.zeros(nuclei.shape, dtype=np.uint32)
    if markers.max() > 0:
        energy = hv_energy(cell_pred.hv, cell_fg)
        elevation = -(1.0 - energy)
        out = watershed(elevation, markers=markers, mask=cell_fg, connectivity=1).astype(np.uint32)

    seeded = set(instance_ids(markers).tolist())
    for nid in instance_ids(nuclei):
        if int(nid) not in seeded:
            out[nuclei == nid] = nid
    return out


def recover_anucleate_cells(
    cells: np.ndarray,
    cell_prob: np.ndarray,
    nuclei: np.ndarray,
    params: ExtractionParams = ExtractionParams(),
) -> np.ndarray:
    """Label leftover foreground blobs that contain no nucleus.

    Each residual component of sufficient area is split by a watershed on
    its inverted distance transform, seeded at distance maxima separated
    by at least ``seed_min_distance_px``. New ids are appended after the
    existing maximum; existing labels are never touched.
    """
    cells = as_label_map(cells)
    nuclei = as_label_map(nuclei)
    cell_prob = np.asarray(cell_prob)
    if not (cells.shape == nuclei.shape == cell_prob.shape):
        raise ValueError("cells, cell_prob and nuclei must share a shape")

    residual = (cell_prob >= params.prob_threshold) & (cells == 0)
    if not residual.any():
        return cells
    out = cells.copy()
    next_id = int(cells.max()) + 1
    comps, n = ndimage.label(residual, structure=FOUR_CONNECTED)
    for comp_id, sl in enumerate(ndimage.find_objects(comps), start=1):
        if sl is None:
            continue
        mask = comps[sl] == comp_id
        if int(mask.sum()) < params.min_anucleate_px:
            continue
        if np.any(nuclei[sl][mask] > 0):
            continue  # blob already has a nucleus: not anucleate
        dist = ndimage.distance_transform_edt(np.pad(mask, 1))[1:-1, 1:-1]
        peaks = peak_local_max(
            dist, min_distance=params.seed_min_distance_px, exclude_border=False, labels=mask.astype(np.uint8)
        )
        seeds = np.zeros(mask.shape, dtype=np.int32)
        if len(peaks) == 0:
            flat = np.flatnonzero(mask & (dist == dist.max()))
            peaks = np.array([[flat[0] // mask.shape[1], flat[0] % mask.shape[1]]])
        for k, (r, c) in enumerate(peaks, start=1):
            seeds[r, c] = k
        ws = watershed(-dist, markers=seeds, mask=mask, connectivity=1)
        for k in range(1, int(seeds.max()) + 1):
            region = ws == k
            if region.any():
                out[sl][region] = next_id
                next_id += 1
    return out


@dataclass
class Contour:
    """Exterior polygon of one instance, in the label map's pixel frame."""

    instance_id: int
    vertices: np.ndarray = field(repr=False)


def trace_contours(labels) -> list[Contour]:
    """One exterior lattice polygon per instance, holes filled, id-ascending."""
    labels = as_label_map(labels)
    out = []
    if labels.size == 0 or labels.max() == 0:
        return out
    for obj_id, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None:
            continue
        mask = ndimage.binary_fill_holes(labels[sl] == obj_id, structure=FOUR_CONNECTED)
        verts = polygons.trace_boundary(mask)
        verts = polygons.translate(verts, sl[1].start, sl[0].start)
        out.append(Contour(instance_id=obj_id, vertices=verts))
    return out
