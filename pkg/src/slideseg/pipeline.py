"""Streaming whole-slide orchestration.

Stages per batch of tiles (fixed grid raster order, so output is
deterministic for any worker count): decode -> tissue gate -> predict ->
per-tile extraction and contour tracing -> core-region filtering ->
merge. Polygon deduplication and id re-assignment run once after all
tiles merge. Peak decoded-tile residency is bounded by the predictor
batch size; runtime scales with tissue area, not cell count.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import ndimage

from . import polygons
from .extraction import (
    DensePrediction,
    ExtractionParams,
    extract_cells_constrained,
    extract_instances_hv,
    recover_anucleate_cells,
    trace_contours,
)
from .geometry import SlideMeta, TileGrid, TileRef, build_tile_grid, virtual_scale_factor
from .labels import overlap_pairs
from .predictor import PredictorSpec, TileBatch, make_predictor

LUMINANCE_MAX = 235 / 255
SATURATION_MIN = 0.05
FLUOR_INTENSITY_MIN = 10 / 255
TISSUE_FRACTION = 0.01


@dataclass(frozen=True)
class PipelineConfig:
    """Everything a slide run needs; hashed into result provenance."""

    tile_size: int = 512
    overlap: int = 64
    target_mpp: float | None = None
    heads: tuple[str, ...] = ("nuclei", "cells")
    tissue_filter: bool = True
    tissue_dilate_tiles: int = 1
    dedup_iou: float = 0.5
    extraction: ExtractionParams = field(default_factory=ExtractionParams)
    predictor: PredictorSpec = field(default_factory=PredictorSpec)
    workers: int = 1

    def config_hash(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class Instance:
    """One detected object in global slide coordinates."""

    id: int
    head: str
    polygon: np.ndarray = field(repr=False)
    centroid: tuple[float, float]
    bbox: tuple[float, float, float, float]
    area_px2: float
    perimeter_px: float
    tile_index: tuple[int, int]
    nucleus_id: int | None = None
    nc_cell_px: int = 0
    nc_nucleus_px: int = 0
    nc_overlap_px: int = 0
    _local_id: int = 0
    _seed_local: int | None = None


@dataclass
class InstanceCollection:
    instances: list[Instance]
    slide: SlideMeta
    provenance: dict

    def by_head(self, head_suffix: str) -> list[Instance]:
        return [i for i in self.instances if i.head.endswith(head_suffix)]

    def __len__(self) -> int:
        return len(self.instances)


class RunStats:
    """Mutable counters for one run (resident-tile bound, timings, failures)."""

    def __init__(self):
        self.resident_tiles = 0
        self.peak_resident_tiles = 0
        self.failures: list[dict] = []
        self.timings: dict[str, float] = {}

    def tile_decoded(self):
        self.resident_tiles += 1
        self.peak_resident_tiles = max(self.peak_resident_tiles, self.resident_tiles)

    def tile_released(self, n: int = 1):
        self.resident_tiles -= n


def resolve_heads(modality: str, kinds) -> tuple[str, ...]:
    """Map generic head kinds ('nuclei', 'cells') to modality-specific heads."""
    prefix = "he" if modality == "brightfield" else "mif"
    out = []
    for kind in kinds:
        if kind in ("nuclei", "cells"):
            out.append(f"{prefix}_{kind}")
        else:
            out.append(kind)  # already fully qualified
    # nuclei first: cell extraction is seeded by the nucleus labels
    return tuple(sorted(set(out), key=lambda h: (not h.endswith("_nuclei"), h)))


def detect_tissue(tile_pixels: np.ndarray, modality: str) -> bool:
    """Tile-level tissue gate with brightfield/fluorescence logic.

    Brightfield: a pixel is tissue-like when its luminance drops below
    235/255 or its saturation exceeds 0.05. Fluorescence: when any
    channel exceeds 10/255. The tile passes when >= 1% of pixels qualify.
    """
    px = np.asarray(tile_pixels, dtype=np.float64) / 255.0
    if px.ndim == 2:
        px = px[..., None]
    if modality == "fluorescence":
        hits = px.max(axis=-1) > FLUOR_INTENSITY_MIN
    else:
        r, g, b = px[..., 0], px[..., 1], px[..., 2]
        luminance = 0.299 * r + 0.587 * g + 0.114 * b
        mx = px.max(axis=-1)
        mn = px.min(axis=-1)
        with np.errstate(invalid="ignore", divide="ignore"):
            saturation = np.where(mx > 0, (mx - mn) / mx, 0.0)
        hits = (luminance < LUMINANCE_MAX) | (saturation > SATURATION_MIN)
    return bool(hits.mean() >= TISSUE_FRACTION)


def core_bounds(tile: TileRef, grid: TileGrid) -> tuple[float, float, float, float]:
    """Centroid-retention rectangle of a tile (margins relaxed at slide edges)."""
    margin = grid.overlap / 2.0
    x_lo = -np.inf if tile.boundary_left else tile.x + margin
    x_hi = np.inf if tile.boundary_right else tile.x + tile.w - margin
    y_lo = -np.inf if tile.boundary_top else tile.y + margin
    y_hi = np.inf if tile.boundary_bottom else tile.y + tile.h - margin
    return x_lo, x_hi, y_lo, y_hi


def filter_core_region(instances: list[Instance], tile: TileRef, grid: TileGrid) -> list[Instance]:
    """Keep instances whose centroid falls in the tile's core rectangle.

    Half-open on the high side so a centroid exactly on a seam belongs to
    exactly one tile.
    """
    x_lo, x_hi, y_lo, y_hi = core_bounds(tile, grid)
    return [i for i in instances if x_lo <= i.centroid[0] < x_hi and y_lo <= i.centroid[1] < y_hi]


def dedup_polygons(instances: list[Instance], iou_threshold: float) -> list[Instance]:
    """Drop the smaller of any same-head pair with rasterized IoU >= threshold.

    Greedy largest-first suppression over a uniform spatial hash of
    bounding boxes; ties in area keep the smaller id. Deterministic for a
    fixed input ordering.
    """
    cell = 256.0
    kept: list[Instance] = []
    grid: dict[tuple[int, int], list[int]] = {}
    order = sorted(range(len(instances)), key=lambda k: (-instances[k].area_px2, instances[k].id))
    for k in order:
        inst = instances[k]
        x0, y0, x1, y1 = inst.bbox
        keys = [
            (cx, cy)
            for cx in range(int(x0 // cell), int(x1 // cell) + 1)
            for cy in range(int(y0 // cell), int(y1 // cell) + 1)
        ]
        duplicate = False
        seen: set[int] = set()
        for key in keys:
            for j in grid.get(key, ()):
                if j in seen:
                    continue
                seen.add(j)
                other = kept[j]
                if other.head != inst.head:
                    continue
                ox0, oy0, ox1, oy1 = other.bbox
                if x1 < ox0 or ox1 < x0 or y1 < oy0 or oy1 < y0:
                    continue
                if polygons.polygon_raster_iou(inst.polygon, other.polygon) >= iou_threshold:
                    duplicate = True
                    break
            if duplicate:
                break
        if not duplicate:
            idx = len(kept)
            kept.append(inst)
            for key in keys:
                grid.setdefault(key, []).append(idx)
    kept.sort(key=lambda i: i.id)
    return kept


class _ScaledTruth:
    """Adapts a slide's truth reader to the processing resolution."""

    def __init__(self, slide, scale: float):
        self.slide = slide
        self.scale = scale

    def read_truth(self, head: str, x: int, y: int, w: int, h: int) -> np.ndarray:
        return self.slide.read_truth(head, x, y, w, h, scale=self.scale)


def _decode_tile(slide, tile: TileRef, scale: float, tile_size: int, modality: str, stats: RunStats) -> np.ndarray:
    if scale == 1.0:
        px = slide.read_region(tile.x, tile.y, tile.w, tile.h)
    else:
        px = slide.read_region_scaled(tile.x, tile.y, tile.w, tile.h, scale)
    stats.tile_decoded()
    if px.shape[:2] != (tile_size, tile_size):
        fill = 255 if modality == "brightfield" else 0
        padded = np.full((tile_size, tile_size) + px.shape[2:], fill, dtype=px.dtype)
        padded[: px.shape[0], : px.shape[1]] = px
        px = padded
    return px


def _extract_tile(
    tile: TileRef,
    preds: dict[str, DensePrediction],
    heads: tuple[str, ...],
    params: ExtractionParams,
) -> list[Instance]:
    """Extraction, tracing, globalization and core stats for one tile."""
    nuclei_head = next((h for h in heads if h.endswith("_nuclei")), None)
    cells_head = next((h for h in heads if h.endswith("_cells")), None)

    crop = (slice(0, tile.h), slice(0, tile.w))
    label_maps: dict[str, np.ndarray] = {}
    if nuclei_head:
        p = preds[nuclei_head]
        pred = DensePrediction(nuclei_head, p.seg_prob[crop], p.hv[crop])
        label_maps[nuclei_head] = extract_instances_hv(pred, params)
    if cells_head:
        p = preds[cells_head]
        pred = DensePrediction(cells_head, p.seg_prob[crop], p.hv[crop])
        if nuclei_head:
            cells = extract_cells_constrained(pred, label_maps[nuclei_head], params)
            cells = recover_anucleate_cells(cells, pred.seg_prob, label_maps[nuclei_head], params)
        else:
            cells = extract_instances_hv(pred, params)
        label_maps[cells_head] = cells

    nc_pairs = {}
    nuc_counts = cell_counts = None
    if nuclei_head and cells_head:
        nc_pairs = overlap_pairs(label_maps[nuclei_head], label_maps[cells_head])
        nuc_counts = np.bincount(label_maps[nuclei_head].ravel())
        cell_counts = np.bincount(label_maps[cells_head].ravel())

    out: list[Instance] = []
    for head, labels in label_maps.items():
        nucleus_ids = set(np.unique(label_maps[nuclei_head]).tolist()) - {0} if nuclei_head else set()
        for contour in trace_contours(labels):
            verts = polygons.translate(contour.vertices, tile.x, tile.y)
            centroid = polygons.polygon_centroid(verts)
            inst = Instance(
                id=0,
                head=head,
                polygon=verts,
                centroid=centroid,
                bbox=polygons.polygon_bbox(verts),
                area_px2=polygons.shoelace_area(verts),
                perimeter_px=polygons.polygon_perimeter(verts),
                tile_index=tile.index,
                _local_id=contour.instance_id,
            )
            if head == cells_head and nuclei_head:
                lid = contour.instance_id
                inst.nc_cell_px = int(cell_counts[lid]) if lid < len(cell_counts) else 0
                if lid in nucleus_ids:
                    inst._seed_local = lid
                    inst.nc_nucleus_px = int(nuc_counts[lid]) if lid < len(nuc_counts) else 0
                    inst.nc_overlap_px = nc_pairs.get((lid, lid), 0)
            out.append(inst)
    return out


def run_slide(slide, config: PipelineConfig, progress_sink=None, roi: tuple[int, int, int, int] | None = None) -> InstanceCollection:
    """Run the full streaming pipeline over a slide (or an ROI of it).

    Per-tile predictor or extraction errors are recorded in provenance and
    skip the tile; the run continues. Returns instances with contiguous
    per-head ids, deterministically ordered.
    """
    t0 = time.perf_counter()
    stats = RunStats()
    meta = slide.meta
    if roi is not None:
        rx, ry, rw, rh = roi
        if rx < 0 or ry < 0 or rw < 1 or rh < 1 or rx + rw > meta.width_px or ry + rh > meta.height_px:
            raise ValueError(f"roi {roi} outside slide extent {meta.width_px}x{meta.height_px}")
        slide = _RegionView(slide, rx, ry, rw, rh)
        meta = slide.meta

    if config.target_mpp is not None:
        scale, mpp_missing = virtual_scale_factor(meta.mpp, config.target_mpp)
    else:
        scale, mpp_missing = 1.0, False
    proc_meta = SlideMeta(
        width_px=max(1, int(round(meta.width_px * scale))),
        height_px=max(1, int(round(meta.height_px * scale))),
        mpp=config.target_mpp if config.target_mpp else meta.mpp,
        modality=meta.modality,
        channel_count=meta.channel_count,
    )
    grid = build_tile_grid(proc_meta, config.tile_size, config.overlap)
    heads = resolve_heads(meta.modality, config.heads)
    spec = replace(config.predictor, heads=heads)
    truth = _ScaledTruth(slide, scale) if getattr(slide, "has_truth", False) else None
    predictor = make_predictor(spec, truth)

    total = len(grid.tiles)
    done = 0

    def progress():
        if progress_sink is not None:
            progress_sink(done, total)

    # pass 1: tile-level tissue grid (decode one tile at a time), then dilation
    t_tissue = time.perf_counter()
    tissue = np.ones((grid.rows, grid.cols), dtype=bool)
    if config.tissue_filter:
        for tile in grid.tiles:
            try:
                px = _decode_tile(slide, tile, scale, config.tile_size, meta.modality, stats)
                tissue[tile.row, tile.col] = detect_tissue(px[: tile.h, : tile.w], meta.modality)
            except Exception as exc:  # decode failure: keep the tile, predictor may still fail
                stats.failures.append({"tile": tile.index, "stage": "tissue", "error": str(exc)})
            finally:
                stats.tile_released()
        if config.tissue_dilate_tiles > 0:
            tissue = ndimage.binary_dilation(
                tissue, structure=np.ones((3, 3), bool), iterations=config.tissue_dilate_tiles
            )
    stats.timings["tissue_s"] = time.perf_counter() - t_tissue

    work = [t for t in grid.tiles if tissue[t.row, t.col]]
    done = total - len(work)
    progress()

    t_predict = 0.0
    t_extract = 0.0
    merged: dict[str, list[Instance]] = {h: [] for h in heads}
    nucleus_key_to_inst: dict[tuple[tuple[int, int], int], Instance] = {}
    pool = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
    try:
        for start in range(0, len(work), spec.batch_size):
            chunk = work[start : start + spec.batch_size]
            decoded = []
            for tile in chunk:
                try:
                    decoded.append((tile, _decode_tile(slide, tile, scale, config.tile_size, meta.modality, stats)))
                except Exception as exc:
                    stats.failures.append({"tile": tile.index, "stage": "decode", "error": str(exc)})
            if not decoded:
                done += len(chunk)
                progress()
                continue
            tp = time.perf_counter()
            try:
                batch_preds = predictor.predict(TileBatch(decoded))
            except Exception as exc:
                for tile, _ in decoded:
                    stats.failures.append({"tile": tile.index, "stage": "predict", "error": str(exc)})
                stats.tile_released(len(decoded))
                done += len(chunk)
                progress()
                continue
            t_predict += time.perf_counter() - tp

            te = time.perf_counter()
            jobs = [(tile, preds) for (tile, _), preds in zip(decoded, batch_preds)]
            stats.tile_released(len(decoded))

            def one(args):
                tile, preds = args
                return _extract_tile(tile, preds, heads, config.extraction)

            if pool is not None:
                results = list(pool.map(one, jobs))
            else:
                results = [one(j) for j in jobs]
            t_extract += time.perf_counter() - te

            for (tile, _), instances in zip(jobs, results):
                _merge_tile(instances, tile, grid, heads, merged, nucleus_key_to_inst)
                done += 1
                progress()
    finally:
        if pool is not None:
            pool.shutdown()

    stats.timings["predict_s"] = t_predict
    stats.timings["extract_s"] = t_extract

    t_merge = time.perf_counter()
    final = _finalize(merged, heads, config.dedup_iou, scale, roi)
    stats.timings["merge_s"] = time.perf_counter() - t_merge
    stats.timings["total_s"] = time.perf_counter() - t0

    provenance = {
        "config_hash": config.config_hash(),
        "heads": list(heads),
        "scale": scale,
        "mpp_missing": mpp_missing,
        "tiles_total": total,
        "tiles_processed": len(work),
        "peak_resident_tiles": stats.peak_resident_tiles,
        "failures": stats.failures,
        "timings": {k: round(v, 6) for k, v in stats.timings.items()},
        "roi": list(roi) if roi else None,
    }
    base_meta = slide.base_meta if roi is not None else meta
    return InstanceCollection(instances=final, slide=base_meta, provenance=provenance)


def _merge_tile(instances, tile, grid, heads, merged, nucleus_key_to_inst):
    """Apply core filtering and append survivors in deterministic order.

    When both heads run, a nucleus is retained exactly when the cell it
    seeds is retained, keeping the nucleus -> cell relation total across
    tile seams (each physical pair survives from exactly one tile).
    """
    nuclei_head = next((h for h in heads if h.endswith("_nuclei")), None)
    cells_head = next((h for h in heads if h.endswith("_cells")), None)
    by_head: dict[str, list[Instance]] = {h: [] for h in heads}
    for inst in instances:
        by_head[inst.head].append(inst)

    if cells_head and nuclei_head:
        kept_cells = filter_core_region(by_head[cells_head], tile, grid)
        kept_seed_ids = {c._seed_local for c in kept_cells if c._seed_local is not None}
        kept_nuclei = [n for n in by_head[nuclei_head] if n._local_id in kept_seed_ids]
        for nuc in kept_nuclei:
            nucleus_key_to_inst[(tile.index, nuc._local_id)] = nuc
        merged[nuclei_head].extend(kept_nuclei)
        merged[cells_head].extend(kept_cells)
    else:
        for head in heads:
            merged[head].extend(filter_core_region(by_head[head], tile, grid))


def _finalize(merged, heads, dedup_iou, scale, roi):
    """Provisional ids, cell-first dedup, id re-assignment, source-space coords."""
    nuclei_head = next((h for h in heads if h.endswith("_nuclei")), None)
    cells_head = next((h for h in heads if h.endswith("_cells")), None)

    for head in heads:
        for k, inst in enumerate(merged[head], start=1):
            inst.id = k

    if cells_head:
        kept_cells = dedup_polygons(merged[cells_head], dedup_iou)
        if nuclei_head:
            kept_keys = {(c.tile_index, c._seed_local) for c in kept_cells if c._seed_local is not None}
            merged[nuclei_head] = [
                n for n in merged[nuclei_head] if (n.tile_index, n._local_id) in kept_keys
            ]
        merged[cells_head] = kept_cells
    if nuclei_head:
        merged[nuclei_head] = dedup_polygons(merged[nuclei_head], dedup_iou)

    # contiguous final ids; remap cell -> nucleus links
    final: list[Instance] = []
    nucleus_final: dict[tuple[tuple[int, int], int], int] = {}
    if nuclei_head:
        for k, inst in enumerate(merged[nuclei_head], start=1):
            inst.id = k
            nucleus_final[(inst.tile_index, inst._local_id)] = k
    if cells_head:
        for k, inst in enumerate(merged[cells_head], start=1):
            inst.id = k
            if inst._seed_local is not None:
                inst.nucleus_id = nucleus_final.get((inst.tile_index, inst._seed_local))

    for head in heads:
        final.extend(merged[head])

    if scale != 1.0 or roi is not None:
        ox = roi[0] if roi else 0
        oy = roi[1] if roi else 0
        for inst in final:
            inst.polygon = inst.polygon / scale + np.array([ox, oy])
            inst.centroid = (inst.centroid[0] / scale + ox, inst.centroid[1] / scale + oy)
            x0, y0, x1, y1 = inst.bbox
            inst.bbox = (x0 / scale + ox, y0 / scale + oy, x1 / scale + ox, y1 / scale + oy)
            inst.area_px2 = inst.area_px2 / (scale * scale)
            inst.perimeter_px = inst.perimeter_px / scale
    return final


class _RegionView:
    """Restrict a slide to a rectangular region (coordinates stay local)."""

    def __init__(self, slide, x: int, y: int, w: int, h: int):
        self._slide = slide
        self.x, self.y = x, y
        self.base_meta = slide.meta
        self.meta = SlideMeta(
            width_px=w,
            height_px=h,
            mpp=slide.meta.mpp,
            modality=slide.meta.modality,
            channel_count=slide.meta.channel_count,
        )

    @property
    def has_truth(self) -> bool:
        return getattr(self._slide, "has_truth", False)

    def read_region(self, x, y, w, h):
        return self._slide.read_region(self.x + x, self.y + y, w, h)

    def read_region_scaled(self, x, y, w, h, scale):
        return self._slide.read_region_scaled(x + int(round(self.x * scale)), y + int(round(self.y * scale)), w, h, scale)

    def read_truth(self, head, x, y, w, h, scale=1.0):
        return self._slide.read_truth(head, x + int(round(self.x * scale)), y + int(round(self.y * scale)), w, h, scale=scale)
