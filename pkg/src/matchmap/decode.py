"""Task-specific decoding of matching heatmaps.

One shared toolbox (peak selection, box readout, NMS) is routed per task:
detection runs peaks -> boxes -> NMS with a large candidate budget,
grounding keeps a single candidate with no post-processing, segmentation
turns each decoded box into a point+box prompt for a promptable mask
stage, pose takes the single highest-probability cell, and counting simply
counts peaks above threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .aligner.model import AlignerOutput
from .grid import BinaryMask, Box, Heatmap, TaskKind, box_iou

COUNT_PEAK_CAP = 1000

TASK_DEFAULT_K = {
    TaskKind.DETECT: 100,
    TaskKind.SEGMENT: 100,
    TaskKind.GROUND: 1,
    TaskKind.REF_SEGMENT: 1,
    TaskKind.POSE: 1,
    TaskKind.COUNT: COUNT_PEAK_CAP,
}


@dataclass(frozen=True)
class DecodeConfig:
    """Decoding knobs; ``k=None`` defers to the task default."""

    k: int | None = None
    nms_iou: float = 0.5
    score_threshold: float = 0.05

    def __post_init__(self) -> None:
        if self.k is not None and self.k < 1:
            raise ValueError("k must be >= 1")
        if not (0.0 <= self.nms_iou <= 1.0 and 0.0 <= self.score_threshold <= 1.0):
            raise ValueError("thresholds must lie in [0, 1]")

    def k_for(self, task: TaskKind) -> int:
        return self.k if self.k is not None else TASK_DEFAULT_K[task]


@dataclass(frozen=True)
class PeakPoint:
    """Grid cell that beats all of its in-bounds 8-neighbors."""

    gx: int
    gy: int
    score: float


@dataclass(frozen=True)
class MaskPrompt:
    """Point+box visual instruction for a promptable mask decoder."""

    point: tuple[float, float]
    box: Box
    score: float

    def __post_init__(self) -> None:
        px, py = self.point
        if not (self.box.x0 <= px <= self.box.x1 and self.box.y0 <= py <= self.box.y1):
            raise ValueError("prompt point must lie inside the prompt box")


@dataclass(frozen=True)
class TaskResult:
    task: TaskKind
    boxes: tuple[tuple[Box, float], ...] = ()
    keypoints: tuple[tuple[float, float, float], ...] = ()
    prompts: tuple[MaskPrompt, ...] = ()
    count: int | None = None


def peak_select(heatmap: Heatmap, k: int, threshold: float = 0.0) -> list[PeakPoint]:
    """Top-k cells strictly greater than their 8 neighbors and >= threshold.

    Border cells compare only against in-bounds neighbors.  Ties are broken
    by (row, column) ascending so results are deterministic.
    """
    data = heatmap.data
    padded = np.full((data.shape[0] + 2, data.shape[1] + 2), -np.inf)
    padded[1:-1, 1:-1] = data
    is_peak = np.ones(data.shape, dtype=bool)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            neighbor = padded[1 + dr : padded.shape[0] - 1 + dr, 1 + dc : padded.shape[1] - 1 + dc]
            is_peak &= data > neighbor
    is_peak &= data >= threshold
    rows, cols = np.nonzero(is_peak)
    order = sorted(range(rows.size), key=lambda i: (-data[rows[i], cols[i]], rows[i], cols[i]))
    return [
        PeakPoint(gx=int(cols[i]), gy=int(rows[i]), score=float(data[rows[i], cols[i]]))
        for i in order[:k]
    ]


def box_readout(
    peaks: list[PeakPoint],
    h_map: np.ndarray,
    w_map: np.ndarray,
    grid: int,
    img_w: float,
    img_h: float,
) -> list[tuple[Box, float]]:
    """Boxes from peaks plus the per-cell size regressions.

    The peak cell index maps to pixel ``index * stride``; sizes are read in
    grid units and scaled by the stride.  Boxes are clipped to the image
    and dropped when a side collapses.
    """
    h_map = np.asarray(h_map, dtype=np.float64)
    w_map = np.asarray(w_map, dtype=np.float64)
    if h_map.shape != (grid, grid) or w_map.shape != (grid, grid):
        raise ValueError("size maps must match the grid")
    stride_x = img_w / grid
    stride_y = img_h / grid
    out: list[tuple[Box, float]] = []
    for pk in peaks:
        cx = pk.gx * stride_x
        cy = pk.gy * stride_y
        bw = w_map[pk.gy, pk.gx] * stride_x
        bh = h_map[pk.gy, pk.gx] * stride_y
        x0 = max(cx - bw / 2.0, 0.0)
        y0 = max(cy - bh / 2.0, 0.0)
        x1 = min(cx + bw / 2.0, img_w)
        y1 = min(cy + bh / 2.0, img_h)
        if x1 - x0 <= 0.0 or y1 - y0 <= 0.0:
            continue
        out.append((Box(x0, y0, x1, y1), pk.score))
    return out


def nms(
    detections: list[tuple[Box, float]], iou_thresh: float = 0.5
) -> list[tuple[Box, float]]:
    """Greedy score-descending suppression; survivors overlap <= iou_thresh.

    Equal scores keep their input order, so the result is deterministic.
    """
    order = sorted(range(len(detections)), key=lambda i: (-detections[i][1], i))
    kept: list[int] = []
    for i in order:
        box_i = detections[i][0]
        if all(box_iou(box_i, detections[j][0]) <= iou_thresh for j in kept):
            kept.append(i)
    return [detections[i] for i in kept]


def _heatmap_of(output: AlignerOutput | Heatmap) -> Heatmap:
    return output.heatmap if isinstance(output, AlignerOutput) else output


def decode_task(
    output: AlignerOutput | Heatmap,
    task: TaskKind,
    cfg: DecodeConfig,
    img_w: float,
    img_h: float,
) -> TaskResult:
    """Route one model output (or bare heatmap) through its task pathway."""
    needs_maps = task in (
        TaskKind.DETECT,
        TaskKind.GROUND,
        TaskKind.SEGMENT,
        TaskKind.REF_SEGMENT,
    )
    if needs_maps and not isinstance(output, AlignerOutput):
        raise TypeError(f"{task.value} decoding needs height/width maps, got a bare heatmap")

    heatmap = _heatmap_of(output)
    grid = heatmap.rows

    if task == TaskKind.COUNT:
        peaks = peak_select(heatmap, COUNT_PEAK_CAP, cfg.score_threshold)
        return TaskResult(task=task, count=len(peaks))

    if task == TaskKind.POSE:
        # single keypoint category per query: plain argmax, no neighbor test
        data = heatmap.data
        flat = int(np.argmax(data))
        gy, gx = divmod(flat, heatmap.cols)
        x = gx * img_w / heatmap.cols
        y = gy * img_h / heatmap.rows
        return TaskResult(task=task, keypoints=((x, y, float(data[gy, gx])),))

    assert isinstance(output, AlignerOutput)
    peaks = peak_select(heatmap, cfg.k_for(task), cfg.score_threshold)
    boxes = box_readout(peaks, output.h_map, output.w_map, grid, img_w, img_h)
    if task in (TaskKind.DETECT, TaskKind.SEGMENT):
        boxes = nms(boxes, cfg.nms_iou)
    if task in (TaskKind.DETECT, TaskKind.GROUND):
        return TaskResult(task=task, boxes=tuple(boxes))

    prompts = []
    for box, score in boxes:
        cx, cy = box.center
        prompts.append(MaskPrompt(point=(cx, cy), box=box, score=score))
    return TaskResult(task=task, prompts=tuple(prompts))


def bilinear_sample(grid_values: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of a cell-indexed grid with edge clamping."""
    rows, cols = grid_values.shape
    gx = np.clip(gx, 0.0, cols - 1.0)
    gy = np.clip(gy, 0.0, rows - 1.0)
    x0 = np.floor(gx).astype(int)
    y0 = np.floor(gy).astype(int)
    x1 = np.minimum(x0 + 1, cols - 1)
    y1 = np.minimum(y0 + 1, rows - 1)
    fx = gx - x0
    fy = gy - y0
    top = grid_values[y0, x0] * (1 - fx) + grid_values[y0, x1] * fx
    bottom = grid_values[y1, x0] * (1 - fx) + grid_values[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def mask_from_prompt(
    prompt: MaskPrompt, heatmap: Heatmap, img_w: int, img_h: int
) -> BinaryMask:
    """Placeholder promptable mask stage (not a real mask decoder).

    Marks the pixels inside the prompt box whose bilinearly-upsampled
    heatmap value reaches half of the prompt's peak score.
    """
    stride_x = img_w / heatmap.cols
    stride_y = img_h / heatmap.rows
    px = (np.arange(img_w) + 0.5) / stride_x
    py = (np.arange(img_h) + 0.5) / stride_y
    gx = np.broadcast_to(px[None, :], (img_h, img_w))
    gy = np.broadcast_to(py[:, None], (img_h, img_w))
    values = bilinear_sample(heatmap.data, gx, gy)
    centers_x = np.arange(img_w) + 0.5
    centers_y = np.arange(img_h) + 0.5
    in_box = (
        (centers_x[None, :] >= prompt.box.x0)
        & (centers_x[None, :] < prompt.box.x1)
        & (centers_y[:, None] >= prompt.box.y0)
        & (centers_y[:, None] < prompt.box.y1)
    )
    return BinaryMask(in_box & (values >= 0.5 * prompt.score))


@dataclass(frozen=True)
class CropTransform:
    """Translation between crop-pixel coordinates and full-image pixels."""

    dx: float
    dy: float

    def apply(self, x: float, y: float) -> tuple[float, float]:
        return (x + self.dx, y + self.dy)

    def invert(self, x: float, y: float) -> tuple[float, float]:
        return (x - self.dx, y - self.dy)


def crop_for_pose(img_w: float, img_h: float, person_box: Box) -> CropTransform:
    """Top-down protocol: keypoints found inside the box crop map back to
    the full image by this transform."""
    if not (math.isfinite(img_w) and math.isfinite(img_h)):
        raise ValueError("image dimensions must be finite")
    return CropTransform(dx=person_box.x0, dy=person_box.y0)
