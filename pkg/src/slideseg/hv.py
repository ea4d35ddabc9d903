"""Horizontal/vertical offset-field targets and training loss evaluations.

HV fields are ``(H, W, 2)`` float32 rasters, channel 0 horizontal and
channel 1 vertical, holding per-pixel offsets from each instance's center
of mass normalized per axis and per sign direction into ``[-1, 1]``.
Background is exactly 0. Losses here are forward (reference) evaluations
only; no gradients are computed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .labels import as_label_map, iter_instances

DERIVATIVE_KERNEL_SIZE = 5
DERIVATIVE_EPS = 1e-15
DICE_SMOOTH = 1e-5
PROB_CLAMP = 1e-7

# The spatial-derivative kernel pair, k_h(i, j) = j / (i^2 + j^2 + eps) for
# offsets i, j in {-2..2} and k_v its transpose. Applied as cross-correlation
# with symmetric ('reflect') border handling so that adding a constant field
# leaves the response unchanged.
_offsets = np.arange(-(DERIVATIVE_KERNEL_SIZE // 2), DERIVATIVE_KERNEL_SIZE // 2 + 1)
_jj, _ii = np.meshgrid(_offsets, _offsets)
KERNEL_H = (_jj / (_ii**2 + _jj**2 + DERIVATIVE_EPS)).astype(np.float64)
KERNEL_V = KERNEL_H.T.copy()


@dataclass(frozen=True)
class LossWeights:
    """Relative weights of the segmentation and HV loss terms."""

    seg_weight: float = 1.0
    hv_weight_nuclei: float = 4.0
    hv_weight_cells: float = 2.0

    def __post_init__(self):
        if min(self.seg_weight, self.hv_weight_nuclei, self.hv_weight_cells) < 0:
            raise ValueError("loss weights must be non-negative")

    @classmethod
    def dual(cls) -> "LossWeights":
        """Paired-decoder scheme: HV weighted 2x for every head."""
        return cls(seg_weight=1.0, hv_weight_nuclei=2.0, hv_weight_cells=2.0)

    @classmethod
    def flex(cls) -> "LossWeights":
        """Single-encoder scheme: nuclear HV 4x, whole-cell HV 2x."""
        return cls(seg_weight=1.0, hv_weight_nuclei=4.0, hv_weight_cells=2.0)


def generate_hv_maps(labels) -> np.ndarray:
    """Instance-wise normalized offset maps from a label raster.

    Per instance and per axis, offsets are taken from the continuous
    center of mass; positive offsets are divided by the axis maximum and
    negative offsets by the magnitude of the axis minimum, so every
    instance with extent on both sides of its center spans the full
    [-1, 1] range. Background and zero-extent axes stay 0.
    """
    labels = as_label_map(labels)
    hv = np.zeros(labels.shape + (2,), dtype=np.float32)
    for _, sl, mask in iter_instances(labels):
        rows, cols = np.nonzero(mask)
        if rows.size == 1:
            continue
        for axis, coords in ((0, cols), (1, rows)):
            off = coords - coords.mean()
            pos_max = off.max()
            neg_min = off.min()
            scaled = np.zeros_like(off)
            if pos_max > 0:
                pos = off > 0
                scaled[pos] = off[pos] / pos_max
            if neg_min < 0:
                neg = off < 0
                scaled[neg] = off[neg] / -neg_min
            hv[sl[0].start + rows, sl[1].start + cols, axis] = scaled
    return hv


def hv_gradients(hv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(dh/dx, dv/dy) via the 5x5 derivative kernels."""
    dh = ndimage.correlate(hv[..., 0].astype(np.float64), KERNEL_H, mode="reflect")
    dv = ndimage.correlate(hv[..., 1].astype(np.float64), KERNEL_V, mode="reflect")
    return dh, dv


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def dice_loss(pred_prob: np.ndarray, target: np.ndarray, smooth: float = DICE_SMOOTH) -> float:
    pred_prob = np.asarray(pred_prob, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_shapes(pred_prob, target)
    inter = float(np.sum(pred_prob * target))
    denom = float(np.sum(pred_prob) + np.sum(target))
    return 1.0 - (2.0 * inter + smooth) / (denom + smooth)


def focal_bce(pred_prob: np.ndarray, target: np.ndarray, alpha: float = 1.0, gamma: float = 2.0) -> float:
    """Mean focal binary cross-entropy, alpha * (1 - p_t)^gamma * (-log p_t)."""
    pred_prob = np.asarray(pred_prob, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_shapes(pred_prob, target)
    p = np.clip(pred_prob, PROB_CLAMP, 1.0 - PROB_CLAMP)
    p_t = np.where(target > 0.5, p, 1.0 - p)
    return float(np.mean(alpha * (1.0 - p_t) ** gamma * -np.log(p_t)))


def hv_mse(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean squared HV error over both channels and the full raster."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_shapes(pred, target)
    return float(np.mean((pred - target) ** 2))


def hv_msge(pred: np.ndarray, target: np.ndarray, foreground: np.ndarray) -> float:
    """Mean squared gradient error restricted to foreground pixels.

    Returns 0 for an empty foreground mask.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_shapes(pred, target)
    fg = np.asarray(foreground, dtype=bool)
    _check_shapes(pred[..., 0], fg)
    if not fg.any():
        return 0.0
    ph, pv = hv_gradients(pred)
    th, tv = hv_gradients(target)
    err_h = (ph - th)[fg]
    err_v = (pv - tv)[fg]
    return float((np.sum(err_h**2) + np.sum(err_v**2)) / (2 * err_h.size))


@dataclass
class HeadSample:
    """One decoder head's predictions and targets for loss evaluation.

    ``seg_target is None`` marks a head without annotations; such heads
    are omitted from the composite mean.
    """

    seg_prob: np.ndarray
    hv_pred: np.ndarray
    seg_target: np.ndarray | None
    hv_target: np.ndarray | None = None
    fg_mask: np.ndarray | None = None

    @property
    def annotated(self) -> bool:
        return self.seg_target is not None


def head_is_nuclear(head: str) -> bool:
    if head.endswith("_nuclei"):
        return True
    if head.endswith("_cells"):
        return False
    raise ValueError(f"unknown head {head!r}")


def composite_loss(
    heads: dict[str, HeadSample],
    scheme: str = "flex",
    weights: LossWeights | None = None,
) -> tuple[float, dict[str, dict[str, float]]]:
    """Weighted multi-head loss, averaged across annotated heads.

    Per head: ``seg_weight * (dice + focal) + w_hv * (mse + msge)`` where
    ``w_hv`` follows the scheme (dual: 2 everywhere; flex: 4 for nuclear
    heads, 2 for whole-cell heads) unless explicit weights are given.
    """
    if weights is None:
        if scheme == "dual":
            weights = LossWeights.dual()
        elif scheme == "flex":
            weights = LossWeights.flex()
        else:
            raise ValueError(f"unknown scheme {scheme!r}")
    included = {name: h for name, h in heads.items() if h.annotated}
    if not included:
        raise ValueError("composite_loss requires at least one annotated head")

    breakdown: dict[str, dict[str, float]] = {}
    total = 0.0
    for name, h in included.items():
        fg = h.fg_mask if h.fg_mask is not None else np.asarray(h.seg_target) > 0.5
        hv_target = h.hv_target if h.hv_target is not None else np.zeros_like(h.hv_pred)
        terms = {
            "dice": dice_loss(h.seg_prob, h.seg_target),
            "focal": focal_bce(h.seg_prob, h.seg_target),
            "mse": hv_mse(h.hv_pred, hv_target),
            "msge": hv_msge(h.hv_pred, hv_target, fg),
        }
        w_hv = weights.hv_weight_nuclei if head_is_nuclear(name) else weights.hv_weight_cells
        terms["total"] = weights.seg_weight * (terms["dice"] + terms["focal"]) + w_hv * (
            terms["mse"] + terms["msge"]
        )
        breakdown[name] = terms
        total += terms["total"]
    return total / len(included), breakdown
