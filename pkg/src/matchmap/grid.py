"""Grid and geometry primitives shared by every stage of the pipeline.

Coordinate conventions used throughout:

* Image coordinates are continuous pixels.  Pixel ``(c, r)`` occupies the
  unit square ``[c, c+1) x [r, r+1)``, so a box covering exactly that pixel
  is ``[c, r, c+1, r+1]``.
* Grid coordinates are continuous in ``[0, grid]``; cell ``(gx, gy)`` sits
  at the integer coordinate ``(gx, gy)`` and corresponds to pixel
  ``(gx * stride_x, gy * stride_y)``.

All types are immutable after construction (arrays are marked read-only)
and every operation here is pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum, IntEnum

import numpy as np


class TaskKind(Enum):
    """Router for the task-specific decoding pathways."""

    DETECT = "detect"
    GROUND = "ground"
    SEGMENT = "segment"
    REF_SEGMENT = "refsegment"
    POSE = "pose"
    COUNT = "count"


class Visibility(IntEnum):
    """Keypoint annotation state (matches the usual 0/1/2 encoding)."""

    ABSENT = 0
    OCCLUDED = 1
    VISIBLE = 2


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = arr.copy()
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Heatmap:
    """Dense grid of matching probabilities in [0, 1]."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError("heatmap data must be a non-empty 2d array")
        if not np.isfinite(arr).all():
            raise ValueError("heatmap values must be finite")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("heatmap values must lie in [0, 1]")
        object.__setattr__(self, "data", _frozen(arr))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "Heatmap":
        return cls(np.zeros((rows, cols)))

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Heatmap) and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class LogitGrid:
    """Unbounded pre-sigmoid grid (raw model output)."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError("logit grid data must be a non-empty 2d array")
        if not np.isfinite(arr).all():
            raise ValueError("logit values must be finite")
        object.__setattr__(self, "data", _frozen(arr))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def sigmoid(self) -> Heatmap:
        """Squash logits into a valid probability heatmap."""
        z = self.data
        # the two-branch form avoids overflow for large |z|
        out = np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)), np.exp(z) / (1.0 + np.exp(z)))
        return Heatmap(np.clip(out, 0.0, 1.0))

    def __eq__(self, other: object) -> bool:
        return isinstance(other, LogitGrid) and np.array_equal(self.data, other.data)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in continuous pixel coordinates, x1 > x0, y1 > y0."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self) -> None:
        vals = (self.x0, self.y0, self.x1, self.y1)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"box coordinates must be finite, got {vals}")
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate box {vals}: need x0 < x1 and y0 < y1")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Row-major boolean pixel mask."""

    bits: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.bits)
        if arr.dtype != np.bool_:
            if not np.isin(arr, (0, 1)).all():
                raise ValueError("mask bits must be boolean or 0/1")
            arr = arr.astype(bool)
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError("mask must be a non-empty 2d array")
        object.__setattr__(self, "bits", _frozen(arr))

    @property
    def rows(self) -> int:
        return self.bits.shape[0]

    @property
    def cols(self) -> int:
        return self.bits.shape[1]

    def count(self) -> int:
        return int(self.bits.sum())

    def __eq__(self, other: object) -> bool:
        return isinstance(other, BinaryMask) and np.array_equal(self.bits, other.bits)


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    visibility: Visibility = Visibility.VISIBLE

    def __post_init__(self) -> None:
        if self.visibility != Visibility.ABSENT:
            if not (np.isfinite(self.x) and np.isfinite(self.y)):
                raise ValueError("labeled keypoints need finite coordinates")

    @property
    def labeled(self) -> bool:
        return self.visibility != Visibility.ABSENT


@dataclass(frozen=True, eq=False)
class Instance:
    """One ground-truth or predicted object.

    ``score`` is 1.0 for ground truth; predictions carry their confidence.
    """

    category: int
    box: Box
    mask: BinaryMask | None = None
    keypoints: tuple[Keypoint, ...] | None = None
    score: float = 1.0

    def __post_init__(self) -> None:
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must be in [0, 1], got {self.score}")
        if self.keypoints is not None:
            object.__setattr__(self, "keypoints", tuple(self.keypoints))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Instance):
            return NotImplemented
        return (
            self.category == other.category
            and self.box == other.box
            and self.mask == other.mask
            and self.keypoints == other.keypoints
            and self.score == other.score
        )


def box_iou(a: Box, b: Box) -> float:
    """Intersection-over-union of two boxes; 0 when disjoint."""
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def mask_iou(a: BinaryMask, b: BinaryMask) -> float:
    """IoU of two same-size masks.  Both empty counts as a perfect match."""
    if (a.rows, a.cols) != (b.rows, b.cols):
        raise ValueError(
            f"mask size mismatch: {(a.rows, a.cols)} vs {(b.rows, b.cols)}"
        )
    inter = int(np.count_nonzero(a.bits & b.bits))
    union = int(np.count_nonzero(a.bits | b.bits))
    if union == 0:
        return 1.0
    return inter / union


def mask_to_box(mask: BinaryMask) -> Box:
    """Tightest box enclosing all set pixels (pixel-occupancy convention)."""
    rows, cols = np.nonzero(mask.bits)
    if rows.size == 0:
        raise ValueError("cannot enclose an empty mask")
    return Box(
        x0=float(cols.min()),
        y0=float(rows.min()),
        x1=float(cols.max()) + 1.0,
        y1=float(rows.max()) + 1.0,
    )


def box_to_grid_center(
    box: Box, img_w: float, img_h: float, grid: int
) -> tuple[float, float]:
    """Continuous grid coordinates of the box center."""
    if grid < 1:
        raise ValueError("grid must be >= 1")
    cx, cy = box.center
    return (cx * grid / img_w, cy * grid / img_h)


def rasterize_box(box: Box, rows: int, cols: int) -> BinaryMask:
    """Mask of all pixels whose centers fall inside the box."""
    cs = np.arange(cols) + 0.5
    rs = np.arange(rows) + 0.5
    inside_x = (cs >= box.x0) & (cs < box.x1)
    inside_y = (rs >= box.y0) & (rs < box.y1)
    return BinaryMask(inside_y[:, None] & inside_x[None, :])
