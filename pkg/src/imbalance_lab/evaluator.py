"""Score thresholding, box decoding, greedy NMS and COCO-style AP."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .anchors import AnchorSet, decode, iou_matrix

logger = logging.getLogger(__name__)

COCO_IOUS = tuple(float(v) for v in np.round(np.linspace(0.5, 0.95, 10), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class EvalConfig:
    # a float is a fixed threshold, "adaptive" means N_f / N of the training split
    threshold: Union[float, str] = 0.05
    nms_iou: float = 0.5
    max_detections: int = 100
    ap_iou_thresholds: List[float] = field(default_factory=lambda: list(COCO_IOUS))

    def __post_init__(self):
        if self.threshold != "adaptive":
            self.threshold = float(self.threshold)
            if not 0.0 <= self.threshold < 1.0:
                raise ValueError("fixed threshold must lie in [0, 1)")

    def resolve_threshold(self, stats=None) -> float:
        if self.threshold == "adaptive":
            if stats is None:
                raise ValueError("adaptive threshold needs imbalance statistics")
            return stats.fg_fraction
        return self.threshold


@dataclass
class Detections:
    boxes: np.ndarray  # [M, 4]
    scores: np.ndarray  # [M]
    labels: np.ndarray  # [M] in 1..C

    def __len__(self) -> int:
        return int(self.scores.shape[0])

    def take(self, idx) -> "Detections":
        return Detections(self.boxes[idx], self.scores[idx], self.labels[idx])

    @classmethod
    def empty(cls) -> "Detections":
        return cls(np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64))


def adaptive_threshold(N_f: float, N: float) -> float:
    return N_f / N


def decode_and_filter(
    probs: np.ndarray, deltas: np.ndarray, anchors: AnchorSet, theta: float, image_size=None
) -> Detections:
    """Keep (anchor, class) pairs with score >= theta; boxes decoded and clipped."""
    if not 0.0 <= theta < 1.0:
        raise ValueError("theta must lie in [0, 1)")
    rows, cols = np.nonzero(probs >= theta)
    boxes = decode(deltas[rows], anchors.anchors[rows])
    if image_size is not None:
        h, w = image_size
        boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0.0, w)
        boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0.0, h)
    return Detections(boxes, probs[rows, cols], cols.astype(np.int64) + 1)


def _nms_single(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float, limit: Optional[int]) -> List[int]:
    order = np.argsort(-scores, kind="stable")
    x1, y1, x2, y2 = (np.ascontiguousarray(boxes[:, k]) for k in range(4))
    area = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    keep: List[int] = []
    while order.size:
        i = int(order[0])
        keep.append(i)
        if limit is not None and len(keep) >= limit:
            break
        rest = order[1:]
        if rest.size == 0:
            break
        iw = np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest])
        ih = np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest])
        inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
        union = area[i] + area[rest] - inter
        degenerate = (area[i] <= 0) | (area[rest] <= 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            ious = np.where(degenerate | (union <= 0), 0.0, inter / union)
        order = rest[ious <= iou_threshold]
    return keep


def nms(dets: Detections, iou_threshold: float = 0.5, max_per_class: Optional[int] = None) -> Detections:
    """Greedy per-class suppression, score-descending with lowest index on ties.

    With ``max_per_class`` the greedy pass stops once that many boxes of a class
    are kept; the kept prefix is unchanged.
    """
    if len(dets) == 0:
        return dets
    kept = []
    for c in np.unique(dets.labels):
        idx = np.flatnonzero(dets.labels == c)
        kept.extend(idx[_nms_single(dets.boxes[idx], dets.scores[idx], iou_threshold, max_per_class)])
    kept = np.array(sorted(kept), dtype=np.int64)
    return dets.take(kept)


def top_detections(dets: Detections, max_detections: int) -> Detections:
    if len(dets) <= max_detections:
        return dets
    order = np.argsort(-dets.scores, kind="stable")[:max_detections]
    return dets.take(np.sort(order))


def postprocess(probs, deltas, anchors: AnchorSet, theta: float, config: EvalConfig, image_size):
    """Threshold, NMS and top-k; returns (final detections, count surviving the threshold)."""
    dets = decode_and_filter(probs, deltas, anchors, theta, image_size)
    survivors = len(dets)
    dets = nms(dets, config.nms_iou, max_per_class=config.max_detections)
    return top_detections(dets, config.max_detections), survivors


def average_precision(tp: np.ndarray, scores: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP from per-detection TP flags (any order)."""
    if n_gt == 0:
        raise ValueError("AP undefined without ground truth")
    if tp.size == 0:
        return 0.0
    order = np.argsort(-scores, kind="mergesort")
    tp = tp[order].astype(np.float64)
    tps = np.cumsum(tp)
    fps = np.cumsum(1.0 - tp)
    recall = tps / n_gt
    precision = tps / np.maximum(tps + fps, np.finfo(np.float64).eps)
    # precision envelope, non-increasing in recall
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.zeros_like(RECALL_POINTS)
    ok = idx < precision.size
    q[ok] = precision[idx[ok]]
    return float(q.mean())


def match_detections(det_boxes, det_scores, gt_boxes, iou_threshold: float) -> np.ndarray:
    """Greedy score-descending matching within one image and class; each gt used once."""
    tp = np.zeros(len(det_scores), dtype=bool)
    if len(det_scores) == 0 or len(gt_boxes) == 0:
        return tp
    ious = iou_matrix(det_boxes, gt_boxes)
    used = np.zeros(len(gt_boxes), dtype=bool)
    for d in np.argsort(-det_scores, kind="mergesort"):
        cand = np.where(used, -1.0, ious[d])
        g = int(np.argmax(cand))
        if cand[g] >= iou_threshold:
            used[g] = True
            tp[d] = True
    return tp


@dataclass
class EvalReport:
    per_class_ap: Dict[int, Dict[float, float]]
    ap: float
    ap50: float
    ap75: float
    detections: int
    survivors: int
    ms_per_scene: float
    threshold: float
    classes_evaluated: List[int]

    def to_dict(self, with_timing: bool = True) -> dict:
        d = {
            "AP": self.ap,
            "AP50": self.ap50,
            "AP75": self.ap75,
            "detections": self.detections,
            "survivors": self.survivors,
            "threshold": self.threshold,
            "classes_evaluated": self.classes_evaluated,
            "per_class_ap": {str(c): {f"{t:.2f}": v for t, v in sorted(aps.items())} for c, aps in sorted(self.per_class_ap.items())},
        }
        if with_timing:
            d["ms_per_scene"] = self.ms_per_scene
        return d


def evaluate(
    detections: Sequence[Detections],
    gts: Sequence,
    num_classes: int,
    iou_thresholds: Sequence[float] = COCO_IOUS,
    threshold: float = float("nan"),
    ms_per_scene: float = 0.0,
    survivors: int = 0,
) -> EvalReport:
    """COCO-style AP over scenes.

    ``gts`` holds (gt_boxes, gt_labels) pairs aligned with ``detections``.
    Classes with no ground truth are left out of the mean.
    """
    if len(detections) == 0:
        raise ValueError("nothing to evaluate")
    if len(detections) != len(gts):
        raise ValueError("detections and ground truth must align")
    per_class: Dict[int, Dict[float, float]] = {}
    for c in range(1, num_classes + 1):
        n_gt = sum(int(np.count_nonzero(np.asarray(lab) == c)) for _, lab in gts)
        if n_gt == 0:
            logger.info("class %d has no ground truth; excluded from the mean", c)
            continue
        per_class[c] = {}
        for thr in iou_thresholds:
            tps, scores = [], []
            for dets, (boxes, labels) in zip(detections, gts):
                sel = dets.labels == c
                g = np.asarray(boxes).reshape(-1, 4)[np.asarray(labels) == c]
                tps.append(match_detections(dets.boxes[sel], dets.scores[sel], g, thr))
                scores.append(dets.scores[sel])
            per_class[c][float(thr)] = average_precision(np.concatenate(tps), np.concatenate(scores), n_gt)
    if not per_class:
        raise ValueError("no class has ground truth")

    def mean_at(thrs):
        return float(np.mean([aps[float(t)] for aps in per_class.values() for t in thrs]))

    thr_list = [float(t) for t in iou_thresholds]
    ap50 = mean_at([0.5]) if 0.5 in thr_list else float("nan")
    ap75 = mean_at([0.75]) if 0.75 in thr_list else float("nan")
    return EvalReport(
        per_class_ap=per_class,
        ap=mean_at(thr_list),
        ap50=ap50,
        ap75=ap75,
        detections=int(sum(len(d) for d in detections)),
        survivors=survivors,
        ms_per_scene=ms_per_scene,
        threshold=threshold,
        classes_evaluated=sorted(per_class),
    )


@dataclass
class ModelOutputs:
    """Per-scene detector outputs kept in memory so several thresholds reuse one forward pass."""

    probs: List[np.ndarray]
    deltas: List[np.ndarray]
    gts: List[tuple]
    image_size: tuple
    forward_ms: float


def run_model(store, det_config, scenes, batch: int = 20) -> ModelOutputs:
    from .detector import forward

    probs, deltas, gts = [], [], []
    start = time.perf_counter()
    ordered = sorted(scenes, key=lambda s: s.scene_id)
    for i in range(0, len(ordered), batch):
        chunk = ordered[i : i + batch]
        images = np.stack([s.image for s in chunk])
        p, d = forward(store, det_config, images)
        probs.extend(np.split(p.data, len(chunk)))
        deltas.extend(np.split(d.data, len(chunk)))
        gts.extend((s.gt_boxes, s.gt_labels) for s in chunk)
    elapsed = (time.perf_counter() - start) * 1000.0
    h, w = ordered[0].image.shape[1:]
    return ModelOutputs(probs, deltas, gts, (h, w), elapsed / max(len(ordered), 1))


def evaluate_outputs(outputs: ModelOutputs, anchors: AnchorSet, theta: float, config: EvalConfig, num_classes: int) -> EvalReport:
    start = time.perf_counter()
    results = [postprocess(p, d, anchors, theta, config, outputs.image_size) for p, d in zip(outputs.probs, outputs.deltas)]
    post_ms = (time.perf_counter() - start) * 1000.0 / len(results)
    dets = [r[0] for r in results]
    survivors = sum(r[1] for r in results)
    return evaluate(dets, outputs.gts, num_classes, config.ap_iou_thresholds, theta, outputs.forward_ms + post_ms, survivors)


SWEEP_COLUMNS = ("theta", "AP", "AP50", "AP75", "survivors", "ms_per_scene")


def threshold_sweep(outputs: ModelOutputs, anchors: AnchorSet, thetas: Sequence, stats, config: EvalConfig, num_classes: int):
    """One row per threshold; the string "adaptive" resolves to N_f / N of ``stats``."""
    rows = []
    for th in thetas:
        label = th
        value = stats.fg_fraction if th == "adaptive" else float(th)
        rep = evaluate_outputs(outputs, anchors, value, config, num_classes)
        rows.append(
            {
                "policy": "adaptive" if label == "adaptive" else "fixed",
                "theta": value,
                "AP": rep.ap,
                "AP50": rep.ap50,
                "AP75": rep.ap75,
                "survivors": rep.survivors,
                "ms_per_scene": rep.ms_per_scene,
                "report": rep,
            }
        )
    return rows
