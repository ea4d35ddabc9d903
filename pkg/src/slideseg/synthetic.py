"""Procedural synthetic slides with exact hidden ground truth.

Instances are ellipses (nucleus plus a concentrically scaled whole-cell
hull) scattered with a bounded fraction of touching pairs. Labels and
pixels for any window are rasterized on demand at any resolution, so
gigapixel-sized slides stream without ever materializing full rasters.
Pixel ownership ties break by smallest normalized center distance, which
splits touching instances along a clean ridge in both the nucleus and the
cell map consistently (the cell partition nests the nucleus partition).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import SlideMeta

BRIGHTFIELD_BG = (245, 245, 245)
CYTOPLASM_RGB = (228, 200, 212)
NUCLEUS_RGB = (94, 62, 134)
FLUOR_NUCLEUS = 180
FLUOR_MEMBRANE = 60


@dataclass(frozen=True)
class SyntheticSpec:
    width: int
    height: int
    seed: int = 0
    instances_per_mpx: float = 60.0
    radius_px: tuple[float, float] = (5.0, 24.0)
    touching_fraction: float = 0.25
    cell_scale: float = 1.6
    anucleate_fraction: float = 0.0
    modality: str = "brightfield"
    mpp: float | None = 0.325
    tissue_rect: tuple[int, int, int, int] | None = None  # restrict placement; None = full extent


@dataclass
class EllipseField:
    """Deterministic ellipse scatter queryable by window and resolution."""

    spec: SyntheticSpec
    cx: np.ndarray = field(repr=False, default=None)
    cy: np.ndarray = field(repr=False, default=None)
    rx: np.ndarray = field(repr=False, default=None)
    ry: np.ndarray = field(repr=False, default=None)
    cos_t: np.ndarray = field(repr=False, default=None)
    sin_t: np.ndarray = field(repr=False, default=None)
    anucleate: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.cx is None:
            self._generate()

    def _generate(self) -> None:
        spec = self.spec
        rng = np.random.default_rng(spec.seed)
        rect = spec.tissue_rect or (0, 0, spec.width, spec.height)
        rx0, ry0, rw, rh = rect
        area_mpx = rw * rh / 1e6
        target = max(0, int(round(spec.instances_per_mpx * area_mpx)))
        r_lo, r_hi = spec.radius_px

        cell_size = 2 * r_hi * spec.cell_scale
        grid: dict[tuple[int, int], list[int]] = {}
        cx, cy, rx, ry, cos_t, sin_t = [], [], [], [], [], []
        touch_budget = int(spec.touching_fraction * target)
        touched = 0
        attempts = 0
        max_attempts = target * 60 + 1000
        while len(cx) < target and attempts < max_attempts:
            attempts += 1
            a = rng.uniform(r_lo, r_hi)
            b = a * rng.uniform(0.6, 1.0)
            margin = a + 1
            if rw <= 2 * margin or rh <= 2 * margin:
                break
            x = rng.uniform(rx0 + margin, rx0 + rw - margin)
            y = rng.uniform(ry0 + margin, ry0 + rh - margin)
            theta = rng.uniform(0, np.pi)
            key = (int(x // cell_size), int(y // cell_size))
            near = []
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    near.extend(grid.get((key[0] + dr, key[1] + dc), ()))
            ok = True
            touching = False
            for j in near:
                d = float(np.hypot(cx[j] - x, cy[j] - y))
                reach = a + max(rx[j], ry[j])
                if d < 0.85 * reach:
                    ok = False
                    break
                if d < 1.15 * reach:
                    touching = True
            if not ok:
                continue
            if touching and touched >= touch_budget:
                continue
            if touching:
                touched += 1
            grid.setdefault(key, []).append(len(cx))
            cx.append(x)
            cy.append(y)
            rx.append(a)
            ry.append(b)
            cos_t.append(np.cos(theta))
            sin_t.append(np.sin(theta))

        n = len(cx)
        self.cx = np.array(cx)
        self.cy = np.array(cy)
        self.rx = np.array(rx)
        self.ry = np.array(ry)
        self.cos_t = np.array(cos_t)
        self.sin_t = np.array(sin_t)
        flags = np.zeros(n, dtype=bool)
        if spec.anucleate_fraction > 0 and n:
            k = int(round(spec.anucleate_fraction * n))
            flags[rng.choice(n, size=k, replace=False)] = True
        self.anucleate = flags

    def __len__(self) -> int:
        return len(self.cx)

    def labels(self, kind: str, x: int, y: int, w: int, h: int, scale: float = 1.0) -> np.ndarray:
        """Instance labels for a window at processing resolution.

        Window origin and size are in processing (target-resolution)
        pixels; with ``scale`` active the field is evaluated at source
        coordinates ``t / scale``. Ids are the 1-based ellipse indices.
        Each ellipse is rasterized over its own bounding box only; pixels
        claimed by several ellipses go to the smallest normalized center
        distance.
        """
        if kind == "nuclei":
            scale_r, include = 1.0, ~self.anucleate
        elif kind == "cells":
            scale_r, include = self.spec.cell_scale, np.ones(len(self), dtype=bool)
        else:
            raise ValueError(f"unknown truth kind {kind!r}")
        out = np.zeros((h, w), dtype=np.uint32)
        if len(self) == 0:
            return out
        # axis-aligned half extents of each rotated ellipse, in source px
        ex = np.sqrt((self.rx * self.cos_t) ** 2 + (self.ry * self.sin_t) ** 2) * scale_r
        ey = np.sqrt((self.rx * self.sin_t) ** 2 + (self.ry * self.cos_t) ** 2) * scale_r
        src_x0, src_y0 = x / scale, y / scale
        src_x1, src_y1 = (x + w - 1) / scale, (y + h - 1) / scale
        idx = np.flatnonzero(
            include
            & (self.cx + ex >= src_x0)
            & (self.cx - ex <= src_x1)
            & (self.cy + ey >= src_y0)
            & (self.cy - ey <= src_y1)
        )
        if idx.size == 0:
            return out
        best_d = np.full((h, w), np.inf)
        for i in idx:
            # window columns/rows overlapped by this ellipse (processing px)
            c0 = max(0, int(np.floor((self.cx[i] - ex[i]) * scale)) - x)
            c1 = min(w - 1, int(np.ceil((self.cx[i] + ex[i]) * scale)) - x)
            r0 = max(0, int(np.floor((self.cy[i] - ey[i]) * scale)) - y)
            r1 = min(h - 1, int(np.ceil((self.cy[i] + ey[i]) * scale)) - y)
            if c1 < c0 or r1 < r0:
                continue
            xs = (x + np.arange(c0, c1 + 1)) / scale - self.cx[i]
            ys = (y + np.arange(r0, r1 + 1)) / scale - self.cy[i]
            dx, dy = np.meshgrid(xs, ys)
            u = dx * self.cos_t[i] + dy * self.sin_t[i]
            v = -dx * self.sin_t[i] + dy * self.cos_t[i]
            d = (u / (self.rx[i] * scale_r)) ** 2 + (v / (self.ry[i] * scale_r)) ** 2
            sub = (slice(r0, r1 + 1), slice(c0, c1 + 1))
            take = (d <= 1.0) & (d < best_d[sub])
            best_d[sub][take] = d[take]
            region = out[sub]
            region[take] = i + 1
        return out

    def image(self, x: int, y: int, w: int, h: int, scale: float = 1.0) -> np.ndarray:
        nuclei = self.labels("nuclei", x, y, w, h, scale)
        cells = self.labels("cells", x, y, w, h, scale)
        if self.spec.modality == "fluorescence":
            img = np.zeros((h, w, 3), dtype=np.uint8)
            img[..., 0] = np.where(cells > 0, FLUOR_MEMBRANE, 0)
            img[..., 2] = np.where(nuclei > 0, FLUOR_NUCLEUS, 0)
            return img
        img = np.empty((h, w, 3), dtype=np.uint8)
        img[:] = BRIGHTFIELD_BG
        img[cells > 0] = CYTOPLASM_RGB
        img[nuclei > 0] = NUCLEUS_RGB
        return img


class SyntheticSlide:
    """In-process slide with procedural pixels and hidden truth labels."""

    def __init__(self, spec: SyntheticSpec):
        self.spec = spec
        self.field = EllipseField(spec)
        self.meta = SlideMeta(
            width_px=spec.width,
            height_px=spec.height,
            mpp=spec.mpp,
            modality=spec.modality,
            channel_count=3,
        )

    def read_region(self, x: int, y: int, w: int, h: int) -> np.ndarray:
        return self.field.image(x, y, w, h)

    def read_region_scaled(self, x: int, y: int, w: int, h: int, scale: float) -> np.ndarray:
        """Window given in processing px; origin maps to source px x/scale."""
        return self.field.image(x, y, w, h, scale)

    def read_truth(self, head: str, x: int, y: int, w: int, h: int, scale: float = 1.0) -> np.ndarray:
        kind = "nuclei" if head.endswith("_nuclei") else "cells"
        return self.field.labels(kind, x, y, w, h, scale)

    @property
    def has_truth(self) -> bool:
        return True

    def close(self) -> None:
        pass


def write_demo_slide(out_dir: str | Path, size: int = 1024, seed: int = 7, name: str = "demo") -> Path:
    """Materialize a synthetic slide as PNG + sidecar metadata + truth rasters."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = SyntheticSpec(width=size, height=size, seed=seed, anucleate_fraction=0.05)
    slide = SyntheticSlide(spec)
    img_path = out_dir / f"{name}.png"
    Image.fromarray(slide.read_region(0, 0, size, size)).save(img_path)
    truth = {}
    for kind in ("nuclei", "cells"):
        npy = out_dir / f"{name}.truth_{kind}.npy"
        np.save(npy, slide.field.labels(kind, 0, 0, size, size))
        truth[kind] = npy.name
    sidecar = {
        "width": size,
        "height": size,
        "mpp": spec.mpp,
        "modality": spec.modality,
        "truth": truth,
    }
    (out_dir / f"{name}.png.meta.json").write_text(json.dumps(sidecar, indent=2))
    return img_path
