"""Instance matching, panoptic quality, Dice and model ranking.

Matching uses a strict IoU threshold (pairs must exceed it); above 0.5
each instance can exceed the threshold with at most one partner, so the
greedy matching below is provably the optimal assignment there.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .labels import as_label_map, instance_ids, overlap_pairs


@dataclass
class MatchReport:
    """TP pairs with IoU plus the unmatched ids on both sides."""

    tp_pairs: list[tuple[int, int, float]] = field(default_factory=list)  # (pred_id, gt_id, iou)
    fp_ids: list[int] = field(default_factory=list)
    fn_ids: list[int] = field(default_factory=list)
    iou_threshold: float = 0.5

    @property
    def tp(self) -> int:
        return len(self.tp_pairs)

    @property
    def fp(self) -> int:
        return len(self.fp_ids)

    @property
    def fn(self) -> int:
        return len(self.fn_ids)


def pair_ious(pred: np.ndarray, gt: np.ndarray) -> dict[tuple[int, int], float]:
    """IoU of every overlapping (pred_id, gt_id) instance pair."""
    inter = overlap_pairs(pred, gt)
    if not inter:
        return {}
    pred_areas = np.bincount(pred.ravel())
    gt_areas = np.bincount(gt.ravel())
    out = {}
    for (p, g), i in inter.items():
        union = int(pred_areas[p]) + int(gt_areas[g]) - i
        out[(p, g)] = i / union
    return out


def match_instances(pred, gt, iou_threshold: float = 0.5) -> MatchReport:
    """Greedy one-to-one matching of candidate pairs with IoU > threshold.

    Candidates are visited by (IoU desc, gt id asc, pred id asc); for
    thresholds above 0.5 this equals the exhaustive optimal assignment.
    """
    pred = as_label_map(pred)
    gt = as_label_map(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    ious = pair_ious(pred, gt)
    candidates = sorted(
        ((p, g, v) for (p, g), v in ious.items() if v > iou_threshold),
        key=lambda t: (-t[2], t[1], t[0]),
    )
    matched_pred: set[int] = set()
    matched_gt: set[int] = set()
    tp_pairs = []
    for p, g, v in candidates:
        if p in matched_pred or g in matched_gt:
            continue
        matched_pred.add(p)
        matched_gt.add(g)
        tp_pairs.append((p, g, v))
    fp = [int(p) for p in instance_ids(pred) if int(p) not in matched_pred]
    fn = [int(g) for g in instance_ids(gt) if int(g) not in matched_gt]
    return MatchReport(tp_pairs=tp_pairs, fp_ids=fp, fn_ids=fn, iou_threshold=iou_threshold)


def panoptic_quality(report: MatchReport) -> float:
    """Sum of matched IoU over |TP| + 0.5 |FP| + 0.5 |FN| (0 when all empty)."""
    denom = report.tp + 0.5 * report.fp + 0.5 * report.fn
    if denom == 0:
        return 0.0
    return float(sum(iou for _, _, iou in report.tp_pairs) / denom)


def dice(pred_mask, gt_mask) -> float:
    """Pixel Dice 2|P&G| / (|P| + |G|); defined as 1.0 when both are empty."""
    p = np.asarray(pred_mask).astype(bool)
    g = np.asarray(gt_mask).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / total


def both_empty(pred_mask, gt_mask) -> bool:
    """Flag for the degenerate Dice convention (both masks empty -> 1.0)."""
    return not np.asarray(pred_mask).astype(bool).any() and not np.asarray(gt_mask).astype(bool).any()


def rank_models(pq_table: dict[str, dict[str, float | None]]) -> dict[str, dict[str, int]]:
    """Top-1/2/3 placement counts per model from a model x dataset PQ matrix.

    Per dataset, models are ranked by PQ descending; ties share the better
    rank (both tied leaders count as Top-1). Missing entries exclude the
    model from that dataset only.
    """
    if not pq_table:
        raise ValueError("empty ranking table")
    datasets = sorted({d for row in pq_table.values() for d in row})
    if not datasets:
        raise ValueError("ranking table has no datasets")
    counts = {m: {"top1": 0, "top2": 0, "top3": 0} for m in pq_table}
    for ds in datasets:
        scores = {m: row[ds] for m, row in pq_table.items() if row.get(ds) is not None}
        for m, s in scores.items():
            rank = 1 + sum(1 for other in scores.values() if other > s)
            for k in (1, 2, 3):
                if rank <= k:
                    counts[m][f"top{k}"] += 1
    return counts
