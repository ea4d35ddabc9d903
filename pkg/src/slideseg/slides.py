"""Slide readers: plain rasters, multi-page pyramid TIFFs, in-memory arrays.

A sidecar ``<path>.meta.json`` file overrides embedded metadata (width,
height, mpp, modality) and may point at ground-truth label rasters, which
is how materialized synthetic slides feed the oracle predictor. Vendor
proprietary formats are out of scope.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Protocol

import numpy as np
from PIL import Image

from .geometry import SlideMeta

Image.MAX_IMAGE_PIXELS = None  # desk-scale synthetic slides can exceed PIL's bomb guard

SUPPORTED_SUFFIXES = (".png", ".tif", ".tiff", ".jpg", ".jpeg")


class Slide(Protocol):
    meta: SlideMeta

    def read_region(self, x: int, y: int, w: int, h: int) -> np.ndarray: ...
    def close(self) -> None: ...


def _to_rgb(arr: np.ndarray) -> np.ndarray:
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    if arr.shape[-1] == 4:
        arr = arr[..., :3]
    return np.ascontiguousarray(arr)


class ArraySlide:
    """In-memory image, optionally with per-head truth label arrays."""

    def __init__(self, pixels: np.ndarray, meta: SlideMeta | None = None, truth: dict[str, np.ndarray] | None = None):
        self.pixels = _to_rgb(np.asarray(pixels))
        h, w = self.pixels.shape[:2]
        self.meta = meta or SlideMeta(width_px=w, height_px=h)
        self._truth = truth or {}

    @property
    def has_truth(self) -> bool:
        return bool(self._truth)

    def read_region(self, x: int, y: int, w: int, h: int) -> np.ndarray:
        return self.pixels[y : y + h, x : x + w]

    def read_region_scaled(self, x: int, y: int, w: int, h: int, scale: float) -> np.ndarray:
        """Window in processing px, resampled from the native raster."""
        if scale == 1.0:
            return self.read_region(x, y, w, h)
        sx = int(round(x / scale))
        sy = int(round(y / scale))
        sw = max(1, int(round(w / scale)))
        sh = max(1, int(round(h / scale)))
        region = self.pixels[sy : sy + sh, sx : sx + sw]
        return np.asarray(Image.fromarray(region).resize((w, h), Image.BILINEAR))

    def read_truth(self, head: str, x: int, y: int, w: int, h: int, scale: float = 1.0) -> np.ndarray:
        """Truth labels for a window; zero-padded beyond the slide extent."""
        kind = "nuclei" if head.endswith("_nuclei") else "cells"
        if kind not in self._truth:
            raise KeyError(f"slide has no truth labels for {kind!r}")
        full = self._truth[kind]
        out = np.zeros((h, w), dtype=full.dtype)
        if scale == 1.0:
            vw = min(w, full.shape[1] - x)
            vh = min(h, full.shape[0] - y)
            if vw > 0 and vh > 0:
                out[:vh, :vw] = full[y : y + vh, x : x + vw]
            return out
        # nearest-neighbor sampling of the source-resolution truth
        xs = np.round((x + np.arange(w)) / scale).astype(int)
        ys = np.round((y + np.arange(h)) / scale).astype(int)
        vx = (xs >= 0) & (xs < full.shape[1])
        vy = (ys >= 0) & (ys < full.shape[0])
        if vx.any() and vy.any():
            out[np.ix_(vy, vx)] = full[np.ix_(ys[vy], xs[vx])]
        return out

    def close(self) -> None:
        pass


class RasterSlide(ArraySlide):
    """File-backed slide decoded through Pillow (PNG/TIFF/JPEG).

    Multi-page TIFFs are treated as a pyramid: page 0 is the base level
    and downsampled reads pick the deepest page that still covers the
    requested scale. The whole base page is held decoded, which is fine
    for the desk-scale files this reader is meant for.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        if not self.path.exists():
            raise FileNotFoundError(str(self.path))
        if self.path.suffix.lower() not in SUPPORTED_SUFFIXES:
            raise ValueError(f"unsupported slide format {self.path.suffix!r}")
        with Image.open(self.path) as im:
            base = _to_rgb(np.asarray(im))
            self._pages = [base]
            n_pages = getattr(im, "n_frames", 1)
            for page in range(1, n_pages):
                im.seek(page)
                self._pages.append(_to_rgb(np.asarray(im)))

        sidecar = load_sidecar(self.path)
        h, w = base.shape[:2]
        meta = SlideMeta(
            width_px=int(sidecar.get("width", w)),
            height_px=int(sidecar.get("height", h)),
            mpp=sidecar.get("mpp"),
            modality=sidecar.get("modality", "brightfield"),
            channel_count=3,
        )
        truth = {}
        for kind, rel in sidecar.get("truth", {}).items():
            truth[kind] = np.load(self.path.parent / rel)
        super().__init__(base, meta=meta, truth=truth)

    def read_page_region(self, downsample: int, x: int, y: int, w: int, h: int) -> np.ndarray:
        """Region at the pyramid page nearest the requested downsample (page coords)."""
        best = 0
        for i, page in enumerate(self._pages):
            ds = round(self.pixels.shape[1] / page.shape[1])
            if ds <= downsample:
                best = i
        return self._pages[best][y : y + h, x : x + w]


def load_sidecar(path: str | Path) -> dict:
    sidecar_path = Path(str(path) + ".meta.json")
    if sidecar_path.exists():
        return json.loads(sidecar_path.read_text())
    return {}


def open_slide(path: str | Path) -> RasterSlide:
    return RasterSlide(path)
