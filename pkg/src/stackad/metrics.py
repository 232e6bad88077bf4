"""Rank-based evaluation metrics with tie-aware definitions.

AUROC uses midranks, AP the non-interpolated threshold-grouped form (tied
scores enter the confusion matrix together), F1-max sweeps thresholds at
every distinct score, and AUPRO integrates mean per-region overlap against
false-positive rate up to a configurable cap.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class MetricError(Exception):
    pass


@dataclass
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        self.labels = np.asarray(self.labels).ravel().astype(int)
        if self.scores.shape != self.labels.shape or self.scores.size == 0:
            raise MetricError("scores and labels must be equally sized and non-empty")
        if not np.all(np.isfinite(self.scores)):
            raise MetricError("scores must be finite")
        if not np.all(np.isin(self.labels, (0, 1))):
            raise MetricError("labels must be binary")

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    @property
    def n_neg(self) -> int:
        return int(self.labels.size - self.labels.sum())


def auroc(s: ScoredSet) -> float:
    """Mann-Whitney statistic with midrank tie handling."""
    if s.n_pos == 0 or s.n_neg == 0:
        raise MetricError("degenerate labels: both classes required")
    order = np.argsort(s.scores, kind="stable")
    sorted_scores = s.scores[order]
    ranks = np.empty(s.scores.size, dtype=np.float64)
    i = 0
    while i < sorted_scores.size:
        j = i
        while j + 1 < sorted_scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum = float(ranks[s.labels == 1].sum())
    n_pos, n_neg = s.n_pos, s.n_neg
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _threshold_groups(s: ScoredSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cumulative TP/FP after admitting each distinct score, descending."""
    order = np.argsort(-s.scores, kind="stable")
    scores = s.scores[order]
    labels = s.labels[order]
    distinct = []
    tps = []
    fps = []
    tp = fp = 0
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and scores[j + 1] == scores[i]:
            j += 1
        tp += int(labels[i : j + 1].sum())
        fp += int(j - i + 1 - labels[i : j + 1].sum())
        distinct.append(scores[i])
        tps.append(tp)
        fps.append(fp)
        i = j + 1
    return np.asarray(distinct), np.asarray(tps, dtype=float), np.asarray(fps, dtype=float)


def average_precision(s: ScoredSet) -> float:
    """Non-interpolated AP; tied scores enter as one threshold group."""
    if s.n_pos == 0:
        raise MetricError("no positives")
    _, tps, fps = _threshold_groups(s)
    precision = tps / (tps + fps)
    delta_tp = np.diff(np.concatenate([[0.0], tps]))
    return float((precision * delta_tp).sum() / s.n_pos)


def f1_max(s: ScoredSet) -> float:
    """Maximum F1 over thresholds placed at each distinct score."""
    if s.n_pos == 0:
        raise MetricError("no positives")
    _, tps, fps = _threshold_groups(s)
    precision = tps / (tps + fps)
    recall = tps / s.n_pos
    denom = precision + recall
    f1 = np.where(denom > 0, 2.0 * precision * recall / np.where(denom > 0, denom, 1.0), 0.0)
    return float(f1.max())


# ---------------------------------------------------------------------------
# Connected components and AUPRO


@dataclass
class RegionSet:
    gt_mask: np.ndarray
    regions: list[np.ndarray] = field(default_factory=list)  # flat pixel indices


def connected_components(mask: np.ndarray) -> RegionSet:
    """8-connected labeling via union-find; regions ordered by first pixel."""
    mask = np.asarray(mask)
    if not np.all(np.isin(np.unique(mask), (0, 1))):
        raise MetricError("mask must be binary")
    h, w = mask.shape
    flat = mask.ravel().astype(bool)
    parent = np.arange(h * w)

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a: int, b: int) -> None:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    for r in range(h):
        for c in range(w):
            idx = r * w + c
            if not flat[idx]:
                continue
            for dr, dc in ((-1, -1), (-1, 0), (-1, 1), (0, -1)):
                rr, cc = r + dr, c + dc
                if 0 <= rr < h and 0 <= cc < w and flat[rr * w + cc]:
                    union(idx, rr * w + cc)

    roots: dict[int, list[int]] = {}
    for idx in range(h * w):
        if flat[idx]:
            roots.setdefault(find(idx), []).append(idx)
    regions = [np.asarray(roots[k], dtype=int) for k in sorted(roots)]
    return RegionSet(gt_mask=mask.astype(np.float64), regions=regions)


def pro_curve(
    maps: list[np.ndarray],
    gts: list[np.ndarray],
    num_thresholds: int = 512,
) -> tuple[np.ndarray, np.ndarray]:
    """(FPR, mean per-region overlap) at descending pooled-quantile thresholds.

    The curve starts at the implicit empty prediction (0, 0) and ends with
    the all-positive prediction (1, 1).
    """
    if len(maps) != len(gts) or not maps:
        raise MetricError("maps and ground truths must be non-empty and aligned")
    region_scores: list[np.ndarray] = []
    neg_scores: list[np.ndarray] = []
    pooled: list[np.ndarray] = []
    for m, g in zip(maps, gts):
        m = np.asarray(m, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if m.shape != g.shape:
            raise MetricError(f"map shape {m.shape} != gt shape {g.shape}")
        pooled.append(m.ravel())
        for region in connected_components(g).regions:
            region_scores.append(np.sort(m.ravel()[region]))
        neg_scores.append(m.ravel()[g.ravel() == 0])
    if not region_scores:
        raise MetricError("no anomalous region in any ground truth")
    negatives = np.sort(np.concatenate(neg_scores))
    if negatives.size == 0:
        raise MetricError("no negative pixels")

    all_scores = np.concatenate(pooled)
    qs = np.linspace(0.0, 1.0, num_thresholds)
    thresholds = np.unique(np.quantile(all_scores, qs))[::-1]

    pro = np.zeros(thresholds.size)
    for sorted_region in region_scores:
        hits = sorted_region.size - np.searchsorted(sorted_region, thresholds, side="left")
        pro += hits / sorted_region.size
    pro /= len(region_scores)
    fp = negatives.size - np.searchsorted(negatives, thresholds, side="left")
    fpr = fp / negatives.size

    fpr = np.concatenate([[0.0], fpr])
    pro = np.concatenate([[0.0], pro])
    return fpr, pro


def integrate_to_cap(fpr: np.ndarray, pro: np.ndarray, cap: float) -> float:
    """Trapezoid area of the piecewise-linear curve on [0, cap], / cap."""
    if cap <= 0 or cap > 1:
        raise MetricError("fpr cap must lie in (0, 1]")
    area = 0.0
    for i in range(1, fpr.size):
        x0, x1 = fpr[i - 1], fpr[i]
        y0, y1 = pro[i - 1], pro[i]
        if x0 >= cap:
            break
        if x1 > cap:
            y1 = y0 + (y1 - y0) * (cap - x0) / (x1 - x0)
            x1 = cap
        area += 0.5 * (y0 + y1) * (x1 - x0)
    return float(area / cap)


def aupro(
    maps: list[np.ndarray],
    gts: list[np.ndarray],
    fpr_cap: float = 0.3,
    num_thresholds: int = 512,
) -> float:
    fpr, pro = pro_curve(maps, gts, num_thresholds)
    return integrate_to_cap(fpr, pro, fpr_cap)


# ---------------------------------------------------------------------------
# Run-level report


def evaluate_run(
    pixel_maps: list[np.ndarray],
    pixel_gts: list[np.ndarray],
    image_scores: ScoredSet,
    fpr_cap: float = 0.3,
    num_thresholds: int = 512,
) -> dict:
    """Pixel (AUPRO, AP, F1-max) and image (AUROC, AP, F1-max) report."""
    if not pixel_maps:
        raise MetricError("no pixel maps")
    pixel_set = ScoredSet(
        scores=np.concatenate([np.asarray(m, np.float64).ravel() for m in pixel_maps]),
        labels=np.concatenate([np.asarray(g).ravel() for g in pixel_gts]).astype(int),
    )
    return {
        "pixel": {
            "aupro": float(aupro(pixel_maps, pixel_gts, fpr_cap, num_thresholds)),
            "ap": float(average_precision(pixel_set)),
            "f1max": float(f1_max(pixel_set)),
        },
        "image": {
            "auroc": float(auroc(image_scores)),
            "ap": float(average_precision(image_scores)),
            "f1max": float(f1_max(image_scores)),
        },
    }


def format_report(report: dict) -> str:
    """Aligned plain-text table mirroring the report dictionary."""
    lines = []
    header = f"{'level':<8}{'metric':<8}{'value':>9}"
    lines.append(header)
    lines.append("-" * len(header))
    for level in ("pixel", "image"):
        for metric, value in report[level].items():
            lines.append(f"{level:<8}{metric:<8}{value:>9.4f}")
    return "\n".join(lines)
