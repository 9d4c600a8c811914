"""Anchor grids, IoU geometry, ground-truth assignment and imbalance counts."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .scenes import Scene

logger = logging.getLogger(__name__)

BACKGROUND = 0
IGNORE = -1
# clamp on decoded log-size deltas, the usual log(1000/16)
MAX_LOG_SIZE_DELTA = float(np.log(1000.0 / 16.0))


@dataclass
class AnchorConfig:
    strides: List[int] = field(default_factory=lambda: [4])
    scales: List[float] = field(default_factory=lambda: [8.0, 12.0, 16.0, 24.0])
    aspect_ratios: List[float] = field(default_factory=lambda: [0.5, 1.0, 2.0])
    fg_thresh: float = 0.5
    bg_thresh: float = 0.4
    # count ignore-band anchors in N for optimal bias and adaptive threshold
    count_ignore_in_n: bool = True

    @property
    def anchors_per_location(self) -> int:
        return len(self.scales) * len(self.aspect_ratios)


@dataclass
class AnchorSet:
    anchors: np.ndarray  # [N, 4]
    strides: List[int]
    scales: List[float]
    aspect_ratios: List[float]
    grid_shapes: List[Tuple[int, int]]

    @property
    def N(self) -> int:
        return int(self.anchors.shape[0])

    @property
    def anchors_per_location(self) -> int:
        return len(self.scales) * len(self.aspect_ratios)


def build_anchors(H: int, W: int, strides: Sequence[int], scales: Sequence[float], aspect_ratios: Sequence[float]) -> AnchorSet:
    """Anchors centred on each stride cell, ordered row-major per level then by shape.

    Shape index runs over scales (outer) and aspect ratios (inner); an aspect
    ratio is height / width at constant area ``scale**2``.
    """
    if not strides or not scales or not aspect_ratios:
        raise ValueError("strides, scales and aspect_ratios must be non-empty")
    if H < max(strides) or W < max(strides):
        raise ValueError(f"grid {H}x{W} smaller than stride {max(strides)}")
    shapes = []
    for s in scales:
        for r in aspect_ratios:
            if s <= 0 or r <= 0:
                raise ValueError("scales and aspect ratios must be positive")
            shapes.append((s / np.sqrt(r), s * np.sqrt(r)))
    shapes = np.array(shapes)  # [A, 2] widths, heights
    levels, grids = [], []
    for stride in strides:
        gh, gw = H // stride, W // stride
        cy, cx = np.meshgrid((np.arange(gh) + 0.5) * stride, (np.arange(gw) + 0.5) * stride, indexing="ij")
        centers = np.stack([cx.ravel(), cy.ravel()], axis=1)  # [L, 2]
        half = shapes / 2.0
        boxes = np.concatenate(
            [centers[:, None, :] - half[None, :, :], centers[:, None, :] + half[None, :, :]], axis=2
        ).reshape(-1, 4)
        levels.append(boxes)
        grids.append((gh, gw))
    return AnchorSet(np.concatenate(levels, axis=0), list(strides), list(scales), list(aspect_ratios), grids)


def iou(box_a, box_b) -> float:
    ax1, ay1, ax2, ay2 = (float(v) for v in box_a)
    bx1, by1, bx2, by2 = (float(v) for v in box_b)
    area_a = max(ax2 - ax1, 0.0) * max(ay2 - ay1, 0.0)
    area_b = max(bx2 - bx1, 0.0) * max(by2 - by1, 0.0)
    if area_a <= 0.0 or area_b <= 0.0:
        return 0.0
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (area_a + area_b - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU, [len(a), len(b)]; zero-area boxes give 0."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    out[(area_a <= 0)[:, None] | (area_b <= 0)[None, :]] = 0.0
    return out


def encode(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """(dcx/wa, dcy/ha, log(wg/wa), log(hg/ha)) per row."""
    wa = anchors[:, 2] - anchors[:, 0]
    ha = anchors[:, 3] - anchors[:, 1]
    cxa = anchors[:, 0] + 0.5 * wa
    cya = anchors[:, 1] + 0.5 * ha
    wg = gt[:, 2] - gt[:, 0]
    hg = gt[:, 3] - gt[:, 1]
    cxg = gt[:, 0] + 0.5 * wg
    cyg = gt[:, 1] + 0.5 * hg
    return np.stack([(cxg - cxa) / wa, (cyg - cya) / ha, np.log(wg / wa), np.log(hg / ha)], axis=1)


def decode(deltas: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    wa = anchors[:, 2] - anchors[:, 0]
    ha = anchors[:, 3] - anchors[:, 1]
    cxa = anchors[:, 0] + 0.5 * wa
    cya = anchors[:, 1] + 0.5 * ha
    dw = np.minimum(deltas[:, 2], MAX_LOG_SIZE_DELTA)
    dh = np.minimum(deltas[:, 3], MAX_LOG_SIZE_DELTA)
    cx = cxa + deltas[:, 0] * wa
    cy = cya + deltas[:, 1] * ha
    w = wa * np.exp(dw)
    h = ha * np.exp(dh)
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


@dataclass
class MatchResult:
    labels: np.ndarray  # [N] in {-1, 0, 1..C}
    matched_gt: np.ndarray  # [N], -1 unless foreground
    regression_targets: np.ndarray  # [N_f, 4], rows follow fg_indices
    fg_indices: np.ndarray  # [N_f] ascending

    @property
    def N(self) -> int:
        return int(self.labels.shape[0])

    @property
    def N_f(self) -> int:
        return int(self.fg_indices.shape[0])

    @property
    def n_ignore(self) -> int:
        return int(np.count_nonzero(self.labels == IGNORE))

    @property
    def n_background(self) -> int:
        return int(np.count_nonzero(self.labels == BACKGROUND))


def match(anchors: AnchorSet, scene: Scene, fg_thresh: float = 0.5, bg_thresh: float = 0.4) -> MatchResult:
    """Max-IoU assignment with per-gt force matching.

    Each gt with positive best IoU claims one anchor of its own: gts are
    visited by descending best IoU (then by box coordinates and label, so the
    result does not depend on list order) and each takes its highest-IoU
    anchor not already claimed, lowest index on ties.
    """
    if fg_thresh < bg_thresh:
        raise ValueError("fg_thresh must be >= bg_thresh")
    n = anchors.N
    boxes, gt_labels = scene.gt_boxes, scene.gt_labels
    labels = np.zeros(n, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    if len(boxes) == 0:
        return MatchResult(labels, matched, np.zeros((0, 4)), np.zeros(0, dtype=np.int64))

    ious = iou_matrix(anchors.anchors, boxes)  # [N, G]
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best_gt]
    fg = best_iou >= fg_thresh
    labels[best_iou < bg_thresh] = BACKGROUND
    labels[(best_iou >= bg_thresh) & ~fg] = IGNORE
    labels[fg] = gt_labels[best_gt[fg]]
    matched[fg] = best_gt[fg]

    gt_best = ious.max(axis=0)
    order = sorted(
        range(len(boxes)),
        key=lambda g: (-gt_best[g], *(float(v) for v in boxes[g]), int(gt_labels[g])),
    )
    claimed = np.zeros(n, dtype=bool)
    for g in order:
        if gt_best[g] <= 0.0:
            continue
        col = np.where(claimed, -1.0, ious[:, g])
        a = int(np.argmax(col))
        if col[a] <= 0.0:
            continue
        claimed[a] = True
        labels[a] = gt_labels[g]
        matched[a] = g

    fg_idx = np.flatnonzero(labels >= 1)
    targets = encode(boxes[matched[fg_idx]], anchors.anchors[fg_idx])
    return MatchResult(labels, matched, targets, fg_idx)


@dataclass
class ImbalanceStats:
    N_total: int
    N_f_total: int
    N_ignore_total: int
    num_scenes: int

    @property
    def ratio(self) -> float:
        """All-to-foreground ratio N / N_f."""
        return self.N_total / self.N_f_total

    @property
    def fg_fraction(self) -> float:
        """N_f / N, the adaptive inference threshold."""
        return self.N_f_total / self.N_total


def imbalance_stats(
    scenes: Sequence[Scene],
    anchors: AnchorSet,
    fg_thresh: float = 0.5,
    bg_thresh: float = 0.4,
    count_ignore_in_n: bool = True,
    matches: Sequence[MatchResult] = None,
) -> ImbalanceStats:
    if len(scenes) == 0:
        raise ValueError("imbalance_stats needs a non-empty dataset")
    if matches is None:
        matches = [match(anchors, s, fg_thresh, bg_thresh) for s in sorted(scenes, key=lambda s: s.scene_id)]
    n_total = n_fg = n_ign = 0
    for m in matches:
        n_total += m.N if count_ignore_in_n else m.N - m.n_ignore
        n_fg += m.N_f
        n_ign += m.n_ignore
    if n_fg == 0:
        raise ValueError("dataset has no foreground anchors; N/N_f is undefined")
    return ImbalanceStats(n_total, n_fg, n_ign, len(matches))
