"""Mask IoU, class-aware AP/AR with greedy confidence-ordered matching, and an
exhaustive-assignment oracle for small cases."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import EmptySplit
from .masks import mask_iou

MASK_TYPES = ("visible", "amodal", "occluding", "occluded")
IOU_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2).tolist())
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
MAX_DETS = 100


@dataclass
class Detection:
    image_id: int
    mask: np.ndarray
    category: int
    score: float


@dataclass
class GroundTruth:
    image_id: int
    mask: np.ndarray
    category: int


def precision_recall_ap(tp_sorted: np.ndarray, num_gt: int) -> float:
    """101-point interpolated AP from TP flags ordered by descending score."""
    if num_gt == 0:
        raise ValueError("AP undefined without ground truth")
    if tp_sorted.size == 0:
        return 0.0
    tp = np.cumsum(tp_sorted)
    fp = np.cumsum(~tp_sorted)
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < envelope.size, envelope[np.minimum(idx, envelope.size - 1)], 0.0)
    return float(sampled.mean())


def _by_image(items):
    groups: dict[int, list] = {}
    for i, it in enumerate(items):
        groups.setdefault(it.image_id, []).append(i)
    return groups


def _top_dets(dets: Sequence[Detection]) -> list[int]:
    """Indices of the ``MAX_DETS`` best-scoring detections per image."""
    keep = []
    for idx in _by_image(dets).values():
        order = sorted(idx, key=lambda i: -dets[i].score)
        keep.extend(order[:MAX_DETS])
    return sorted(keep)


def _cached_iou(cache: dict | None, det: Detection, gt: GroundTruth) -> float:
    if cache is None:
        return mask_iou(det.mask, gt.mask)
    key = (id(det), id(gt))
    if key not in cache:
        cache[key] = mask_iou(det.mask, gt.mask)
    return cache[key]


def greedy_match(dets: Sequence[Detection], gts: Sequence[GroundTruth], threshold: float,
                 iou_cache: dict | None = None) -> np.ndarray:
    """TP flag per detection.

    Within each image, detections in descending score order take the
    unmatched ground truth of the same category with the highest IoU, provided
    IoU >= ``threshold``.
    """
    tp = np.zeros(len(dets), dtype=bool)
    gt_groups = _by_image(gts)
    for image_id, d_idx in _by_image(dets).items():
        g_idx = gt_groups.get(image_id, [])
        taken = set()
        for i in sorted(d_idx, key=lambda i: -dets[i].score):
            best, best_iou = None, threshold
            for j in g_idx:
                if j in taken or gts[j].category != dets[i].category:
                    continue
                iou = _cached_iou(iou_cache, dets[i], gts[j])
                if iou >= best_iou:
                    best, best_iou = j, iou
            if best is not None:
                taken.add(best)
                tp[i] = True
    return tp


def _score_order(dets: Sequence[Detection], subset: Sequence[int]) -> list[int]:
    return sorted(subset, key=lambda i: -dets[i].score)


def _per_category(dets, gts):
    cats = sorted({g.category for g in gts})
    for c in cats:
        d_idx = [i for i in _top_dets(dets) if dets[i].category == c]
        g_idx = [j for j, g in enumerate(gts) if g.category == c]
        yield c, d_idx, g_idx


def average_precision(dets: Sequence[Detection], gts: Sequence[GroundTruth],
                      threshold: float, iou_cache: dict | None = None) -> tuple[float, float]:
    """``(AP, recall)`` at one IoU threshold, averaged over categories with ground truth."""
    if not gts:
        raise EmptySplit("no ground truth instances")
    top = _top_dets(dets)
    tp = greedy_match([dets[i] for i in top], gts, threshold, iou_cache)
    tp_of = dict(zip(top, tp))
    aps, recalls = [], []
    for _, d_idx, g_idx in _per_category(dets, gts):
        flags = np.array([tp_of[i] for i in _score_order(dets, d_idx)], dtype=bool)
        aps.append(precision_recall_ap(flags, len(g_idx)))
        recalls.append(flags.sum() / len(g_idx))
    return float(np.mean(aps)), float(np.mean(recalls))


def oracle_average_precision(dets: Sequence[Detection], gts: Sequence[GroundTruth],
                             threshold: float) -> float:
    """Best AP over every one-to-one assignment of detections to same-image,
    same-category ground truths with IoU >= ``threshold``.  Exponential; for
    cases with a handful of instances only."""
    if not gts:
        raise EmptySplit("no ground truth instances")
    aps = []
    for _, d_idx, g_idx in _per_category(dets, gts):
        order = _score_order(dets, d_idx)
        options = []
        for i in order:
            ok = [j for j in g_idx if gts[j].image_id == dets[i].image_id
                  and mask_iou(dets[i].mask, gts[j].mask) >= threshold]
            options.append([None] + ok)
        best = 0.0
        for choice in itertools.product(*options):
            used = [j for j in choice if j is not None]
            if len(used) != len(set(used)):
                continue
            flags = np.array([j is not None for j in choice], dtype=bool)
            best = max(best, precision_recall_ap(flags, len(g_idx)))
        aps.append(best)
    return float(np.mean(aps))


@dataclass
class MaskTypeReport:
    mean_iou: float
    ap50: float
    ap75: float
    ap: float
    ar100: float

    def to_json(self) -> dict:
        return {"mean_iou": self.mean_iou, "AP50": self.ap50, "AP75": self.ap75,
                "AP": self.ap, "AR100": self.ar100}


@dataclass
class EvalReport:
    per_type: dict[str, MaskTypeReport] = field(default_factory=dict)
    num_instances: int = 0

    def __getitem__(self, key: str) -> MaskTypeReport:
        return self.per_type[key]

    def to_json(self) -> dict:
        return {"num_instances": self.num_instances,
                **{t: self.per_type[t].to_json() for t in MASK_TYPES if t in self.per_type}}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)

    @classmethod
    def from_json(cls, obj: dict) -> "EvalReport":
        per = {}
        for t in MASK_TYPES:
            if t in obj:
                d = obj[t]
                per[t] = MaskTypeReport(d["mean_iou"], d["AP50"], d["AP75"], d["AP"], d["AR100"])
        return cls(per, int(obj.get("num_instances", 0)))


def evaluate_masks(dets: Sequence[Detection], gts: Sequence[GroundTruth],
                   paired: bool = True) -> MaskTypeReport:
    """Metrics for one mask type.

    With ``paired`` the i-th detection was produced for the i-th ground truth
    (ground-truth boxes), and mean IoU averages over those pairs.
    """
    if not gts:
        raise EmptySplit("no ground truth instances")
    ious = [mask_iou(d.mask, g.mask) for d, g in zip(dets, gts)] if paired else []
    aps, recalls = [], []
    cache: dict = {}
    for t in IOU_THRESHOLDS:
        ap, rec = average_precision(dets, gts, t, cache)
        aps.append(ap)
        recalls.append(rec)
    return MaskTypeReport(
        mean_iou=float(np.mean(ious)) if ious else float("nan"),
        ap50=aps[0], ap75=aps[IOU_THRESHOLDS.index(0.75)],
        ap=float(np.mean(aps)), ar100=float(np.mean(recalls)),
    )


def evaluate_predictions(per_image: Sequence[tuple[list[dict], list[dict]]],
                         mask_types: Sequence[str] = MASK_TYPES) -> EvalReport:
    """``per_image`` holds ``(predictions, ground_truths)`` lists aligned by
    instance; each entry has ``masks`` (type -> image-frame bool mask) and
    ``category``, predictions also ``score``."""
    if not per_image or not any(gts for _, gts in per_image):
        raise EmptySplit("evaluation split has no instances")
    report = EvalReport(num_instances=sum(len(g) for _, g in per_image))
    for t in mask_types:
        if any(t not in p["masks"] for preds, _ in per_image for p in preds):
            continue
        dets, gts = [], []
        for image_id, (preds, truths) in enumerate(per_image):
            for p, g in zip(preds, truths):
                dets.append(Detection(image_id, p["masks"][t], int(p["category"]), float(p["score"])))
                gts.append(GroundTruth(image_id, g["masks"][t], int(g["category"])))
        report.per_type[t] = evaluate_masks(dets, gts)
    return report
