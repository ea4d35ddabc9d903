"""Pluggable dense predictors for tile batches.

Two implementations stand in for the network forward pass: a synthetic
oracle that derives predictions from hidden ground-truth labels (with
optional noise for robustness sweeps), and a file-backed adapter that
loads rasters produced by any external inference runtime.

Prediction file format (one file per head and tile, named
``<head>_<x>_<y>.bin``): a 16-byte header of magic ``b"DPR1"`` and three
little-endian uint32 fields (width, height, channels), followed by
``channels`` row-major float32 planes. Channel order: seg_prob, h, v.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
from scipy import ndimage

from .extraction import HEADS, DensePrediction
from .geometry import TileRef
from .hv import generate_hv_maps

MAGIC = b"DPR1"
HEADER = struct.Struct("<4sIII")

PREDICTOR_KINDS = ("synthetic_oracle", "file_backed")


@dataclass(frozen=True)
class NoiseSpec:
    """Gaussian perturbations and boundary jitter for the oracle."""

    prob_sigma: float = 0.0
    hv_sigma: float = 0.0
    boundary_jitter_px: int = 0

    def __post_init__(self):
        if self.prob_sigma < 0 or self.hv_sigma < 0 or self.boundary_jitter_px < 0:
            raise ValueError("noise parameters must be non-negative")

    @property
    def active(self) -> bool:
        return self.prob_sigma > 0 or self.hv_sigma > 0 or self.boundary_jitter_px > 0


@dataclass(frozen=True)
class PredictorSpec:
    kind: str = "synthetic_oracle"
    heads: tuple[str, ...] = ("he_nuclei",)
    batch_size: int = 8
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    source_dir: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in PREDICTOR_KINDS:
            raise ValueError(f"unknown predictor kind {self.kind!r}")
        for head in self.heads:
            if head not in HEADS:
                raise ValueError(f"unknown head {head!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.kind == "file_backed" and not self.source_dir:
            raise ValueError("file_backed predictor requires source_dir")


@dataclass
class TileBatch:
    """Decoded tiles with their grid references; uniform shape per batch."""

    tiles: list[tuple[TileRef, np.ndarray]]

    def __post_init__(self):
        shapes = {px.shape for _, px in self.tiles}
        if len(shapes) > 1:
            raise ValueError(f"tile batch must have uniform shape, got {shapes}")

    def __len__(self) -> int:
        return len(self.tiles)


class TruthProvider(Protocol):
    """Access to hidden ground-truth labels, keyed by head, for the oracle."""

    def read_truth(self, head: str, x: int, y: int, w: int, h: int) -> np.ndarray: ...


class Predictor(Protocol):
    def predict(self, batch: TileBatch) -> list[dict[str, DensePrediction]]: ...


class OraclePredictor:
    """Emits the exact prediction a perfect network would produce.

    Per tile: foreground indicator of the hidden labels as seg_prob and
    the generated HV maps as the offset field, then optional Gaussian
    noise (clamped to valid ranges) and morphological jitter of the
    foreground boundary. The RNG is seeded per (seed, tile origin, head)
    so results are independent of batch composition and call order.
    """

    def __init__(self, spec: PredictorSpec, truth: TruthProvider):
        self.spec = spec
        self.truth = truth

    def predict(self, batch: TileBatch) -> list[dict[str, DensePrediction]]:
        out = []
        for tile, pixels in batch.tiles:
            per_head = {}
            for head in self.spec.heads:
                labels = self.truth.read_truth(head, tile.x, tile.y, pixels.shape[1], pixels.shape[0])
                if labels.shape != pixels.shape[:2]:
                    raise ValueError(f"truth shape {labels.shape} does not match tile {pixels.shape[:2]}")
                per_head[head] = self._predict_one(head, tile, labels)
            out.append(per_head)
        return out

    def _predict_one(self, head: str, tile: TileRef, labels: np.ndarray) -> DensePrediction:
        seg = (labels > 0).astype(np.float32)
        hv = generate_hv_maps(labels)
        noise = self.spec.noise
        if noise.active:
            rng = np.random.default_rng((self.spec.seed, tile.x, tile.y, HEADS.index(head)))
            if noise.boundary_jitter_px > 0:
                k = int(rng.integers(-noise.boundary_jitter_px, noise.boundary_jitter_px + 1))
                fg = seg > 0.5
                if k > 0:
                    fg = ndimage.binary_dilation(fg, iterations=k)
                elif k < 0:
                    fg = ndimage.binary_erosion(fg, iterations=-k)
                seg = fg.astype(np.float32)
            if noise.prob_sigma > 0:
                seg = np.clip(seg + rng.normal(0.0, noise.prob_sigma, seg.shape), 0.0, 1.0).astype(np.float32)
            if noise.hv_sigma > 0:
                hv = np.clip(hv + rng.normal(0.0, noise.hv_sigma, hv.shape), -1.0, 1.0).astype(np.float32)
        return DensePrediction(head=head, seg_prob=seg, hv=hv)


class FileBackedPredictor:
    """Loads per-tile prediction rasters written by an external runtime."""

    def __init__(self, spec: PredictorSpec):
        self.spec = spec
        self.source_dir = Path(spec.source_dir)

    def predict(self, batch: TileBatch) -> list[dict[str, DensePrediction]]:
        out = []
        for tile, pixels in batch.tiles:
            per_head = {}
            for head in self.spec.heads:
                path = self.source_dir / prediction_filename(head, tile.x, tile.y)
                if not path.exists():
                    raise FileNotFoundError(f"missing prediction file {path}")
                pred = read_prediction_file(path, head)
                if pred.seg_prob.shape != pixels.shape[:2]:
                    raise ValueError(
                        f"prediction raster {pred.seg_prob.shape} does not match tile {pixels.shape[:2]}"
                    )
                per_head[head] = pred
            out.append(per_head)
        return out


def prediction_filename(head: str, x: int, y: int) -> str:
    return f"{head}_{x}_{y}.bin"


def write_prediction_file(path: str | Path, pred: DensePrediction) -> None:
    h, w = pred.seg_prob.shape
    planes = np.stack([pred.seg_prob, pred.hv[..., 0], pred.hv[..., 1]]).astype("<f4")
    with open(path, "wb") as f:
        f.write(HEADER.pack(MAGIC, w, h, planes.shape[0]))
        f.write(planes.tobytes())


def read_prediction_file(path: str | Path, head: str) -> DensePrediction:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise ValueError(f"truncated prediction file {path}")
    magic, w, h, c = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"bad magic in {path}: {magic!r}")
    if c != 3:
        raise ValueError(f"expected 3 channels (seg, h, v), got {c}")
    expected = HEADER.size + 4 * w * h * c
    if len(raw) != expected:
        raise ValueError(f"size mismatch in {path}: {len(raw)} != {expected}")
    planes = np.frombuffer(raw, dtype="<f4", offset=HEADER.size).reshape(c, h, w)
    return DensePrediction(head=head, seg_prob=planes[0], hv=np.stack([planes[1], planes[2]], axis=-1))


def make_predictor(spec: PredictorSpec, truth: TruthProvider | None = None) -> Predictor:
    if spec.kind == "synthetic_oracle":
        if truth is None:
            raise ValueError("synthetic_oracle predictor requires a truth provider")
        return OraclePredictor(spec, truth)
    return FileBackedPredictor(spec)
