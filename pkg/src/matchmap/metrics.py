"""Evaluation metrics: COCO-style AP for boxes/masks/keypoints and
cumulative IoU for referring segmentation.

Matching is greedy: predictions in score-descending order each claim the
unmatched ground truth of highest similarity, provided it reaches the
threshold.  AP uses 101-point interpolation, averaged per category and
then across categories (categories without ground truth are skipped).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .grid import BinaryMask, Instance, Keypoint, Visibility, box_iou, mask_iou

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))

# the 17-keypoint reference constants (2 * per-keypoint sigma)
COCO_KAPPAS = (
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072,
    0.062, 0.062, 0.107, 0.107, 0.087, 0.087, 0.089, 0.089,
)


@dataclass(frozen=True)
class MatchSpec:
    similarity: str = "box_iou"
    thresholds: tuple[float, ...] = COCO_THRESHOLDS
    per_category: bool = True
    max_dets: int = 100

    def __post_init__(self) -> None:
        if self.similarity not in ("box_iou", "mask_iou", "oks"):
            raise ValueError(f"unknown similarity {self.similarity!r}")
        ts = self.thresholds
        if not ts or any(not (0.0 < t <= 1.0) for t in ts):
            raise ValueError("thresholds must lie in (0, 1]")
        if any(a >= b for a, b in zip(ts, ts[1:])):
            raise ValueError("thresholds must be strictly increasing")


@dataclass(frozen=True)
class OksParams:
    kappas: tuple[float, ...]
    area_floor: float = 1.0

    def __post_init__(self) -> None:
        if any(k <= 0 for k in self.kappas):
            raise ValueError("kappas must be positive")
        if self.area_floor <= 0:
            raise ValueError("area_floor must be positive")

    @classmethod
    def coco_defaults(cls) -> "OksParams":
        return cls(kappas=COCO_KAPPAS)

    @classmethod
    def uniform(cls, n_keypoints: int, kappa: float = 0.1) -> "OksParams":
        return cls(kappas=(kappa,) * n_keypoints)


@dataclass(frozen=True)
class EvalReport:
    ap: float
    ap50: float
    ap75: float
    per_category: dict[int, dict[str, float]]
    true_positives: int
    false_positives: int
    false_negatives: int
    similarity: str = "box_iou"


def oks(
    pred: Sequence[Keypoint],
    gt: Sequence[Keypoint],
    gt_area: float,
    params: OksParams,
) -> float:
    """Object keypoint similarity, averaged over labeled ground-truth
    keypoints; the area scale is floored to stay meaningful on tiny boxes."""
    if len(pred) != len(gt) or len(gt) != len(params.kappas):
        raise ValueError("keypoint lists and kappas must have equal lengths")
    s2 = max(float(gt_area), params.area_floor)
    terms = []
    for p, g, kappa in zip(pred, gt, params.kappas):
        if g.visibility == Visibility.ABSENT:
            continue
        d2 = (p.x - g.x) ** 2 + (p.y - g.y) ** 2
        terms.append(math.exp(-d2 / (2.0 * s2 * kappa * kappa)))
    if not terms:
        raise ValueError("ground truth has no labeled keypoints")
    return float(sum(terms) / len(terms))


def _similarity_fn(
    kind: str, oks_params: OksParams | None
) -> Callable[[Instance, Instance], float]:
    if kind == "box_iou":
        return lambda p, g: box_iou(p.box, g.box)
    if kind == "mask_iou":
        def f(p: Instance, g: Instance) -> float:
            if p.mask is None or g.mask is None:
                raise ValueError("mask similarity requires masks on all instances")
            return mask_iou(p.mask, g.mask)
        return f
    if kind == "oks":
        if oks_params is None:
            raise ValueError("oks similarity requires OksParams")
        def f(p: Instance, g: Instance) -> float:
            if p.keypoints is None or g.keypoints is None:
                raise ValueError("oks similarity requires keypoints on all instances")
            return oks(p.keypoints, g.keypoints, g.box.area, oks_params)
        return f
    raise ValueError(f"unknown similarity {kind!r}")


def _rank_predictions(
    preds: Mapping[int, Sequence[Instance]], category: int | None, max_dets: int
) -> list[tuple[float, int, int]]:
    """Global score-descending ranking as (score, image_id, local index)."""
    ranked: list[tuple[float, int, int]] = []
    for img_id in sorted(preds):
        selected = [
            (i, inst)
            for i, inst in enumerate(preds[img_id])
            if category is None or inst.category == category
        ]
        selected.sort(key=lambda pair: (-pair[1].score, pair[0]))
        for i, inst in selected[:max_dets]:
            ranked.append((inst.score, img_id, i))
    ranked.sort(key=lambda r: (-r[0], r[1], r[2]))
    return ranked


def _match_category(
    preds: Mapping[int, Sequence[Instance]],
    gts: Mapping[int, Sequence[Instance]],
    category: int | None,
    threshold: float,
    sim: Callable[[Instance, Instance], float],
    max_dets: int,
) -> tuple[list[bool], int]:
    """Greedy matching; returns per-ranked-prediction TP flags and #GT."""
    gt_lists = {
        img_id: [g for g in gts.get(img_id, ()) if category is None or g.category == category]
        for img_id in set(gts) | set(preds)
    }
    n_gt = sum(len(v) for v in gt_lists.values())
    taken: dict[int, set[int]] = {img_id: set() for img_id in gt_lists}
    flags: list[bool] = []
    for _score, img_id, local_i in _rank_predictions(preds, category, max_dets):
        pred = preds[img_id][local_i]
        best_j, best_sim = -1, threshold
        for j, gt in enumerate(gt_lists.get(img_id, ())):
            if j in taken[img_id]:
                continue
            s = sim(pred, gt)
            if s > best_sim or (s == best_sim and best_j < 0 and s >= threshold):
                best_j, best_sim = j, s
        if best_j >= 0:
            taken[img_id].add(best_j)
            flags.append(True)
        else:
            flags.append(False)
    return flags, n_gt


def _interpolated_ap(flags: Sequence[bool], n_gt: int) -> float:
    """101-point interpolated average precision from ranked TP flags."""
    if n_gt == 0 or len(flags) == 0:
        return 0.0
    tp = np.cumsum(np.asarray(flags, dtype=np.float64))
    ranks = np.arange(1, len(flags) + 1, dtype=np.float64)
    recall = tp / n_gt
    precision = tp / ranks
    # envelope: best precision achieved at or beyond each recall level
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    points = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(recall, points, side="left")
    valid = idx < len(flags)
    return float(np.where(valid, envelope[np.minimum(idx, len(flags) - 1)], 0.0).mean())


def average_precision(
    preds: Mapping[int, Sequence[Instance]],
    gts: Mapping[int, Sequence[Instance]],
    spec: MatchSpec,
    threshold: float,
    oks_params: OksParams | None = None,
) -> float:
    """AP at one similarity threshold (category-averaged when configured)."""
    sim = _similarity_fn(spec.similarity, oks_params)
    if not spec.per_category:
        flags, n_gt = _match_category(preds, gts, None, threshold, sim, spec.max_dets)
        return _interpolated_ap(flags, n_gt)
    categories = sorted(
        {g.category for insts in gts.values() for g in insts}
    )
    values = []
    for cid in categories:
        flags, n_gt = _match_category(preds, gts, cid, threshold, sim, spec.max_dets)
        if n_gt == 0:
            continue
        values.append(_interpolated_ap(flags, n_gt))
    return float(np.mean(values)) if values else 0.0


def _build_report(
    preds: Mapping[int, Sequence[Instance]],
    gts: Mapping[int, Sequence[Instance]],
    spec: MatchSpec,
    oks_params: OksParams | None,
) -> EvalReport:
    sim = _similarity_fn(spec.similarity, oks_params)
    categories = sorted({g.category for insts in gts.values() for g in insts})
    per_category: dict[int, dict[str, float]] = {}
    tp = fp = fn = 0
    ap_by_threshold: dict[float, list[float]] = {t: [] for t in spec.thresholds}
    for cid in categories:
        cat_aps = {}
        for t in spec.thresholds:
            flags, n_gt = _match_category(preds, gts, cid, t, sim, spec.max_dets)
            cat_aps[t] = _interpolated_ap(flags, n_gt)
            ap_by_threshold[t].append(cat_aps[t])
            if t == 0.5:
                cat_tp = sum(flags)
                tp += cat_tp
                fp += len(flags) - cat_tp
                fn += n_gt - cat_tp
        per_category[cid] = {
            "ap": float(np.mean(list(cat_aps.values()))),
            "ap50": cat_aps.get(0.5, 0.0),
            "ap75": cat_aps.get(0.75, 0.0),
        }
    means = {t: float(np.mean(v)) if v else 0.0 for t, v in ap_by_threshold.items()}
    return EvalReport(
        ap=float(np.mean(list(means.values()))) if means else 0.0,
        ap50=means.get(0.5, 0.0),
        ap75=means.get(0.75, 0.0),
        per_category=per_category,
        true_positives=tp,
        false_positives=fp,
        false_negatives=fn,
        similarity=spec.similarity,
    )


def detection_map(
    preds: Mapping[int, Sequence[Instance]],
    gts: Mapping[int, Sequence[Instance]],
    spec: MatchSpec | None = None,
) -> EvalReport:
    return _build_report(preds, gts, spec or MatchSpec("box_iou"), None)


def segmentation_map(
    preds: Mapping[int, Sequence[Instance]],
    gts: Mapping[int, Sequence[Instance]],
    spec: MatchSpec | None = None,
) -> EvalReport:
    return _build_report(preds, gts, spec or MatchSpec("mask_iou"), None)


def keypoint_map(
    preds: Mapping[int, Sequence[Instance]],
    gts: Mapping[int, Sequence[Instance]],
    oks_params: OksParams,
    spec: MatchSpec | None = None,
) -> EvalReport:
    # ground truth without a single labeled keypoint cannot be scored
    gts = {
        img_id: [
            g
            for g in insts
            if g.keypoints is not None and any(k.labeled for k in g.keypoints)
        ]
        for img_id, insts in gts.items()
    }
    return _build_report(preds, gts, spec or MatchSpec("oks"), oks_params)


def cumulative_iou(
    pred_masks: Sequence[BinaryMask], gt_masks: Sequence[BinaryMask]
) -> float:
    """Dataset-level sum(intersection) / sum(union) over mask pairs."""
    if len(pred_masks) != len(gt_masks):
        raise ValueError("prediction and ground-truth lists must pair up")
    inter = union = 0
    for p, g in zip(pred_masks, gt_masks):
        if (p.rows, p.cols) != (g.rows, g.cols):
            raise ValueError("mask pair dimensions differ")
        inter += int(np.count_nonzero(p.bits & g.bits))
        union += int(np.count_nonzero(p.bits | g.bits))
    if union == 0:
        return 1.0
    return inter / union


def report_lines(report: EvalReport, prefix: str = "") -> list[str]:
    """Flatten a report into sorted ``key=value`` lines."""
    tag = f"{prefix}." if prefix else ""
    lines = {
        f"{tag}similarity": report.similarity,
        f"{tag}ap": repr(report.ap),
        f"{tag}ap50": repr(report.ap50),
        f"{tag}ap75": repr(report.ap75),
        f"{tag}tp": str(report.true_positives),
        f"{tag}fp": str(report.false_positives),
        f"{tag}fn": str(report.false_negatives),
    }
    for cid, vals in report.per_category.items():
        for key, value in vals.items():
            lines[f"{tag}category.{cid}.{key}"] = repr(value)
    return [f"{k}={v}" for k, v in sorted(lines.items())]


def report_to_dict(report: EvalReport) -> dict:
    return {
        "similarity": report.similarity,
        "ap": report.ap,
        "ap50": report.ap50,
        "ap75": report.ap75,
        "tp": report.true_positives,
        "fp": report.false_positives,
        "fn": report.false_negatives,
        "per_category": {
            str(cid): dict(vals) for cid, vals in report.per_category.items()
        },
    }
