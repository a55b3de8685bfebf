"""
Evaluation metrics.

Image- and pixel-level AUROC, average precision, threshold-maximized F1 and
the per-region overlap curve area (AUPRO). Single-class inputs raise
UndefinedMetricError; nothing is silently reported as 0.
"""

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage, stats

from datamodels import ComboMetrics, ContractError, ShapeError, UndefinedMetricError

logger = logging.getLogger(__name__)

AUPRO_BINS = 256
EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


@dataclass
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels).reshape(-1)
        if self.scores.shape != self.labels.shape:
            raise ShapeError(f"{self.scores.size} scores vs {self.labels.size} labels")
        if not np.all(np.isin(self.labels, (0, 1))):
            raise ContractError("labels must be 0 or 1")
        self.labels = self.labels.astype(np.int64)

    @property
    def positives(self) -> int:
        return int(self.labels.sum())

    @property
    def negatives(self) -> int:
        return int(self.labels.size - self.labels.sum())


def _require(s: ScoredSet, metric: str, negatives: bool = True) -> None:
    if s.positives == 0:
        raise UndefinedMetricError(f"{metric} undefined: no positive samples")
    if negatives and s.negatives == 0:
        raise UndefinedMetricError(f"{metric} undefined: no negative samples")


def _block_counts(s: ScoredSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Distinct scores descending with cumulative (tp, fp) at the end of each tie block."""
    order = np.argsort(-s.scores, kind="stable")
    sorted_scores = s.scores[order]
    sorted_labels = s.labels[order]
    ends = np.r_[np.flatnonzero(np.diff(sorted_scores)), sorted_scores.size - 1]
    tp = np.cumsum(sorted_labels)[ends]
    fp = (ends + 1) - tp
    return sorted_scores[ends], tp, fp


# ============================================================================
# Ranking metrics
# ============================================================================


def auroc(s: ScoredSet) -> float:
    """Mann-Whitney U with average ranks for ties."""
    _require(s, "AUROC")
    ranks = stats.rankdata(s.scores, method="average")
    n_pos, n_neg = s.positives, s.negatives
    u = ranks[s.labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(s: ScoredSet) -> float:
    """Sum of recall increments times precision over descending tie blocks."""
    _require(s, "AP", negatives=False)
    _, tp, fp = _block_counts(s)
    precision = tp / (tp + fp)
    recall = tp / s.positives
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def f1_max(s: ScoredSet) -> tuple[float, float]:
    """Best F1 over thresholds at the distinct scores (positive iff score >= t); ties go to the lower threshold."""
    _require(s, "F1", negatives=False)
    thresholds, tp, fp = _block_counts(s)
    fn = s.positives - tp
    f1 = 2.0 * tp / (2.0 * tp + fp + fn)
    # ascending threshold order, so argmax picks the lowest threshold among ties
    best = int(np.argmax(f1[::-1]))
    return float(f1[::-1][best]), float(thresholds[::-1][best])


# ============================================================================
# Regions and AUPRO
# ============================================================================


def connected_components(mask: np.ndarray) -> list[np.ndarray]:
    """8-connected regions as flat pixel indices, ordered by first raster-scan pixel."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeError(f"connected_components expects [H, W], got {mask.shape}")
    labels, count = ndimage.label(mask > 0, structure=EIGHT_CONNECTED)
    flat = labels.reshape(-1)
    return [np.flatnonzero(flat == k) for k in range(1, count + 1)]


def _pixel_terms(maps: Sequence[np.ndarray], masks: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray, np.ndarray, int, int]:
    """Per-pixel scores, FP increment (1 on normal pixels) and PRO increment (1/|region| inside regions)."""
    if len(maps) != len(masks):
        raise ShapeError(f"{len(maps)} maps vs {len(masks)} masks")
    scores, fp_inc, pro_inc = [], [], []
    n_regions = 0
    for score_map, mask in zip(maps, masks):
        score_map = np.asarray(score_map, dtype=np.float64)
        if score_map.shape != np.shape(mask):
            raise ShapeError(f"map {score_map.shape} vs mask {np.shape(mask)}")
        overlap = np.zeros(score_map.size)
        for region in connected_components(mask):
            overlap[region] = 1.0 / region.size
            n_regions += 1
        scores.append(score_map.reshape(-1))
        fp_inc.append((np.asarray(mask).reshape(-1) == 0).astype(np.float64))
        pro_inc.append(overlap)
    scores = np.concatenate(scores)
    fp_inc = np.concatenate(fp_inc)
    return scores, fp_inc, np.concatenate(pro_inc), n_regions, int(fp_inc.sum())


def _integrate(fpr: np.ndarray, pro: np.ndarray, fpr_limit: float) -> float:
    """
    Area under PRO(FPR) up to fpr_limit, normalized by fpr_limit.

    Segments fully below the limit use the trapezoid rule; the segment that
    crosses the limit contributes (limit - f_left) * pro_left.
    """
    area = 0.0
    for i in range(1, fpr.size):
        f0, f1 = fpr[i - 1], fpr[i]
        if f1 <= fpr_limit:
            area += (f1 - f0) * 0.5 * (pro[i - 1] + pro[i])
        else:
            area += (fpr_limit - f0) * pro[i - 1]
            break
    return float(area / fpr_limit)


def pro_curve(
    maps: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    mode: str = "exact",
) -> tuple[np.ndarray, np.ndarray]:
    """(fpr, pro) points ordered by decreasing threshold, starting at (0, 0)."""
    scores, fp_inc, pro_inc, n_regions, n_normal = _pixel_terms(maps, masks)
    if n_regions == 0:
        raise UndefinedMetricError("AUPRO undefined: no anomalous regions")
    if n_normal == 0:
        raise UndefinedMetricError("AUPRO undefined: no normal pixels")

    if mode == "exact":
        order = np.argsort(-scores, kind="stable")
        sorted_scores = scores[order]
        fpr = np.cumsum(fp_inc[order]) / n_normal
        pro = np.cumsum(pro_inc[order]) / n_regions
        # the last entry of each tie block is the state at threshold == that score
        keep = np.r_[sorted_scores[:-1] != sorted_scores[1:], True]
        fpr, pro = fpr[keep], pro[keep]
    elif mode == "binned":
        thresholds = np.linspace(scores.min(), scores.max(), AUPRO_BINS)[::-1]
        order = np.argsort(-scores, kind="stable")
        fp_cum = np.r_[0.0, np.cumsum(fp_inc[order])]
        pro_cum = np.r_[0.0, np.cumsum(pro_inc[order])]
        # number of pixels with score >= t, per threshold
        ascending = scores[order][::-1]
        counts = scores.size - np.searchsorted(ascending, thresholds, side="left")
        fpr = fp_cum[counts] / n_normal
        pro = pro_cum[counts] / n_regions
    else:
        raise ContractError(f"unknown AUPRO mode '{mode}'")

    fpr = np.r_[0.0, np.minimum(fpr, 1.0)]
    pro = np.r_[0.0, np.minimum(pro, 1.0)]
    return fpr, pro


def aupro(
    maps: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    fpr_limit: float = 0.3,
    mode: str = "exact",
) -> float:
    if not 0.0 < fpr_limit <= 1.0:
        raise ContractError(f"fpr_limit must lie in (0, 1], got {fpr_limit}")
    fpr, pro = pro_curve(maps, masks, mode=mode)
    return _integrate(fpr, pro, fpr_limit)


# ============================================================================
# Full cell set for one combination
# ============================================================================


def evaluate_scores(
    image_scores: np.ndarray,
    image_labels: np.ndarray,
    maps: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    fpr_limit: float = 0.3,
    aupro_mode: str = "exact",
) -> ComboMetrics:
    images = ScoredSet(image_scores, image_labels)
    pixels = ScoredSet(
        np.concatenate([np.asarray(m, dtype=np.float64).reshape(-1) for m in maps]),
        np.concatenate([(np.asarray(k).reshape(-1) > 0).astype(np.int64) for k in masks]),
    )
    return ComboMetrics(
        auroc_img=auroc(images),
        auroc_px=auroc(pixels),
        ap_img=average_precision(images),
        ap_px=average_precision(pixels),
        f1_img=f1_max(images)[0],
        f1_px=f1_max(pixels)[0],
        aupro=aupro(maps, masks, fpr_limit=fpr_limit, mode=aupro_mode),
    )
