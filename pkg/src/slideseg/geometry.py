"""Coordinate systems, resolution handling and tile grid construction.

Conventions used across the package:

* origin is the top-left corner of the slide, ``x`` indexes columns and
  ``y`` indexes rows;
* pixel centers sit at integer coordinates, so the pixel ``(x, y)`` covers
  the square ``[x - 0.5, x + 0.5] x [y - 0.5, y + 0.5]``;
* all tile origins and sizes are expressed in pixels of the resolution the
  grid was built for (the "processing" resolution when virtual rescaling
  is active).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

MODALITIES = ("brightfield", "fluorescence")


@dataclass(frozen=True)
class SlideMeta:
    """Static description of a slide raster."""

    width_px: int
    height_px: int
    mpp: float | None = None
    modality: str = "brightfield"
    channel_count: int = 3

    def __post_init__(self):
        if self.width_px < 1 or self.height_px < 1:
            raise ValueError(f"slide dimensions must be >= 1, got {self.width_px}x{self.height_px}")
        if self.mpp is not None and self.mpp <= 0:
            raise ValueError(f"mpp must be positive, got {self.mpp}")
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}, expected one of {MODALITIES}")
        if self.channel_count < 1:
            raise ValueError("channel_count must be >= 1")


@dataclass(frozen=True)
class TileRef:
    """One tile of a grid: index, global origin, size and slide-edge flags.

    Boundary flags mark tile edges that coincide with the slide boundary;
    the overlap margin is relaxed on those edges during core filtering.
    """

    row: int
    col: int
    x: int
    y: int
    w: int
    h: int
    boundary_left: bool = False
    boundary_top: bool = False
    boundary_right: bool = False
    boundary_bottom: bool = False

    @property
    def index(self) -> tuple[int, int]:
        return (self.row, self.col)

    @property
    def origin(self) -> tuple[int, int]:
        return (self.x, self.y)

    @property
    def size(self) -> tuple[int, int]:
        return (self.w, self.h)


@dataclass(frozen=True)
class TileGrid:
    """Overlapping tile decomposition of a slide extent."""

    width_px: int
    height_px: int
    tile_size: int
    overlap: int
    rows: int
    cols: int
    tiles: tuple[TileRef, ...] = field(repr=False)

    @property
    def stride(self) -> int:
        return self.tile_size - self.overlap

    def tile_at(self, row: int, col: int) -> TileRef:
        return self.tiles[row * self.cols + col]

    def __len__(self) -> int:
        return len(self.tiles)


def _axis_origins(dim: int, tile_size: int, stride: int) -> list[tuple[int, int]]:
    """Clamped (origin, size) pairs covering one axis."""
    if dim <= tile_size:
        return [(0, min(dim, tile_size))]
    count = math.ceil((dim - tile_size) / stride) + 1
    out = []
    for i in range(count):
        origin = i * stride
        if origin + tile_size > dim:
            origin = dim - tile_size
        out.append((origin, tile_size))
    return out


def build_tile_grid(slide: SlideMeta, tile_size: int, overlap: int) -> TileGrid:
    """Build the overlapping tile grid covering the slide extent.

    Boundary tiles whose nominal origin would run past the slide are
    clamped back so the predictor always sees full-size tiles; slides
    smaller than ``tile_size`` yield a single tile of the slide's size.
    """
    if tile_size < 1:
        raise ValueError(f"tile_size must be >= 1, got {tile_size}")
    if not 0 <= overlap < tile_size:
        raise ValueError(f"overlap must satisfy 0 <= overlap < tile_size, got {overlap}")

    stride = tile_size - overlap
    xs = _axis_origins(slide.width_px, tile_size, stride)
    ys = _axis_origins(slide.height_px, tile_size, stride)

    tiles = []
    for row, (y, h) in enumerate(ys):
        for col, (x, w) in enumerate(xs):
            tiles.append(
                TileRef(
                    row=row,
                    col=col,
                    x=x,
                    y=y,
                    w=w,
                    h=h,
                    boundary_left=x == 0,
                    boundary_top=y == 0,
                    boundary_right=x + w == slide.width_px,
                    boundary_bottom=y + h == slide.height_px,
                )
            )
    return TileGrid(
        width_px=slide.width_px,
        height_px=slide.height_px,
        tile_size=tile_size,
        overlap=overlap,
        rows=len(ys),
        cols=len(xs),
        tiles=tuple(tiles),
    )


class ScaleFactor(NamedTuple):
    """Virtual rescaling factor with a flag for missing source metadata."""

    scale: float
    mpp_missing: bool


def virtual_scale_factor(source_mpp: float | None, target_mpp: float) -> ScaleFactor:
    """Scale mapping source pixels to target-resolution pixels.

    ``scale = source_mpp / target_mpp``; a target-resolution tile of side
    ``s`` corresponds to a source region of side ``round(s / scale)``.
    When the source MPP is unknown the slide is processed at native
    resolution (scale 1.0) and the flag is set.
    """
    if target_mpp <= 0:
        raise ValueError(f"target mpp must be positive, got {target_mpp}")
    if source_mpp is None:
        return ScaleFactor(1.0, True)
    if source_mpp <= 0:
        raise ValueError(f"source mpp must be positive, got {source_mpp}")
    return ScaleFactor(source_mpp / target_mpp, False)


def tile_to_global(tile: TileRef, local: tuple[float, float], scale: float = 1.0) -> tuple[float, float]:
    """Map tile-local coordinates (processing resolution) to global source pixels.

    With virtual rescaling active the tile origin is expressed in source
    pixels while ``local`` is in target-resolution pixels, hence the
    division by ``scale``.
    """
    lx, ly = local
    if not (-0.5 <= lx <= tile.w - 0.5 and -0.5 <= ly <= tile.h - 0.5):
        raise ValueError(f"local point {local} outside tile of size {tile.size}")
    return (tile.x + lx / scale, tile.y + ly / scale)


def global_to_local(tile: TileRef, point: tuple[float, float], scale: float = 1.0) -> tuple[float, float]:
    gx, gy = point
    return ((gx - tile.x) * scale, (gy - tile.y) * scale)
