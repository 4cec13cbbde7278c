"""Ground-truth construction: Gaussian target heatmaps and size-regression maps.

Boxes (or mask-derived boxes, or keypoints) become per-category probability
grids: each object splats ``exp(-((x-gx)^2+(y-gy)^2) / (2 sigma^2))``
around its continuous grid-space center, overlapping objects compose by
per-cell max, and the rounded center cell is pinned to exactly 1.0 so every
object owns one unambiguous positive cell.  Box height/width (in grid
units) are written into two regression maps at that same cell.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .grid import (
    Box,
    BinaryMask,
    Heatmap,
    Instance,
    Visibility,
    box_to_grid_center,
    mask_to_box,
)

RADIUS_FLOOR = 0.5


@dataclass(frozen=True)
class EncodeConfig:
    """Knobs for target construction.

    ``min_overlap`` drives the size-adaptive spread for boxes;
    ``keypoint_sigma`` is the fixed spread (grid units) for keypoints.
    """

    grid: int = 32
    min_overlap: float = 0.7
    keypoint_sigma: float = 2.0
    compose: str = "max"

    def __post_init__(self) -> None:
        if self.grid < 4:
            raise ValueError("grid must be >= 4")
        if not (0.0 < self.min_overlap < 1.0):
            raise ValueError("min_overlap must be in (0, 1)")
        if self.keypoint_sigma <= 0.0:
            raise ValueError("keypoint_sigma must be positive")
        if self.compose != "max":
            raise ValueError(f"unsupported composition {self.compose!r}")


@dataclass(frozen=True, eq=False)
class SizeTargets:
    """Per-cell height/width regression targets, valid only at center cells."""

    h_map: np.ndarray
    w_map: np.ndarray
    pos_mask: np.ndarray

    def __post_init__(self) -> None:
        h = np.asarray(self.h_map, dtype=np.float64)
        w = np.asarray(self.w_map, dtype=np.float64)
        pos = np.asarray(self.pos_mask, dtype=bool)
        if not (h.shape == w.shape == pos.shape) or h.ndim != 2:
            raise ValueError("size target maps must share one 2d shape")
        if (h < 0).any() or (w < 0).any():
            raise ValueError("size targets must be nonnegative")
        if (h[~pos] != 0).any() or (w[~pos] != 0).any():
            raise ValueError("size targets must be zero off the positive mask")
        for name, arr in (("h_map", h), ("w_map", w), ("pos_mask", pos)):
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @classmethod
    def zeros(cls, grid: int) -> "SizeTargets":
        z = np.zeros((grid, grid))
        return cls(z, z.copy(), np.zeros((grid, grid), dtype=bool))

    def num_positive(self) -> int:
        return int(self.pos_mask.sum())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SizeTargets):
            return NotImplemented
        return (
            np.array_equal(self.h_map, other.h_map)
            and np.array_equal(self.w_map, other.w_map)
            and np.array_equal(self.pos_mask, other.pos_mask)
        )


def gaussian_radius(height: float, width: float, min_overlap: float = 0.7) -> float:
    """Largest center displacement (grid units) keeping IoU >= ``min_overlap``.

    Considers the three worst-case geometries of a same-size box whose
    corners drift by the radius: the box translating diagonally, shrinking
    on both sides, and growing on both sides.  Each gives a quadratic in r;
    the binding constraint is the smallest positive root.  Floored at 0.5
    cells so tiny objects keep a usable spread.
    """
    if height <= 0.0 or width <= 0.0:
        raise ValueError("object size must be positive")
    if not (0.0 < min_overlap < 1.0):
        raise ValueError("min_overlap must be in (0, 1)")
    t = min_overlap
    h, w = float(height), float(width)

    # translation: r^2 - (w+h) r + wh(1-t)/(1+t) >= 0, keep the smaller root
    b1 = h + w
    c1 = w * h * (1.0 - t) / (1.0 + t)
    r1 = (b1 - math.sqrt(b1 * b1 - 4.0 * c1)) / 2.0

    # both corners inward: 4 r^2 - 2(w+h) r + (1-t) wh >= 0
    b2 = 2.0 * (h + w)
    c2 = (1.0 - t) * w * h
    r2 = (b2 - math.sqrt(b2 * b2 - 16.0 * c2)) / 8.0

    # both corners outward: 4t r^2 + 2t(w+h) r + (t-1) wh <= 0
    a3 = 4.0 * t
    b3 = 2.0 * t * (h + w)
    c3 = (t - 1.0) * w * h
    r3 = (-b3 + math.sqrt(b3 * b3 - 4.0 * a3 * c3)) / (2.0 * a3)

    return max(min(r1, r2, r3), RADIUS_FLOOR)


def sigma_from_radius(radius: float) -> float:
    """Gaussian spread for a given radius (diameter spans six sigma)."""
    return (2.0 * radius + 1.0) / 6.0


def splat_gaussian(
    target: Heatmap, center: tuple[float, float], sigma: float
) -> Heatmap:
    """Max-compose one Gaussian kernel into the heatmap.

    The kernel is evaluated at integer cell coordinates against the
    continuous center, over the full grid (no cutoff), so results are exact.
    """
    if sigma <= 0.0:
        raise ValueError("sigma must be positive")
    gx, gy = center
    if not (0.0 <= gx <= target.cols and 0.0 <= gy <= target.rows):
        raise ValueError(f"center {center} outside grid {target.rows}x{target.cols}")
    xs = np.arange(target.cols, dtype=np.float64)
    ys = np.arange(target.rows, dtype=np.float64)
    d2 = (xs[None, :] - gx) ** 2 + (ys[:, None] - gy) ** 2
    kernel = np.exp(-d2 / (2.0 * sigma * sigma))
    return Heatmap(np.maximum(target.data, kernel))


def center_cell(gx: float, gy: float, grid: int) -> tuple[int, int]:
    """Round a continuous grid coordinate half-up to one in-bounds cell."""
    cx = min(max(int(math.floor(gx + 0.5)), 0), grid - 1)
    cy = min(max(int(math.floor(gy + 0.5)), 0), grid - 1)
    return cx, cy


def encode_detection(
    instances: Sequence[Instance],
    img_w: float,
    img_h: float,
    cfg: EncodeConfig,
    categories: Iterable[int] | None = None,
) -> tuple[dict[int, Heatmap], SizeTargets]:
    """Build per-category center heatmaps plus shared size targets.

    Returns one heatmap per category present (plus explicit zeros for any
    extra ``categories`` requested).  The rounded center cell of every
    instance is set to exactly 1.0 and receives the grid-unit box height
    and width in the regression maps; instance order decides collisions.
    """
    grid = cfg.grid
    maps: dict[int, np.ndarray] = {}
    if categories is not None:
        for cid in categories:
            maps[int(cid)] = np.zeros((grid, grid))
    h_map = np.zeros((grid, grid))
    w_map = np.zeros((grid, grid))
    pos = np.zeros((grid, grid), dtype=bool)

    for inst in instances:
        box = inst.box
        gh = box.height * grid / img_h
        gw = box.width * grid / img_w
        radius = gaussian_radius(gh, gw, cfg.min_overlap)
        sigma = sigma_from_radius(radius)
        gx, gy = box_to_grid_center(box, img_w, img_h, grid)

        heat = maps.setdefault(inst.category, np.zeros((grid, grid)))
        splatted = splat_gaussian(Heatmap(heat), (gx, gy), sigma).data.copy()
        cx, cy = center_cell(gx, gy, grid)
        splatted[cy, cx] = 1.0
        maps[inst.category] = splatted

        pos[cy, cx] = True
        h_map[cy, cx] = gh
        w_map[cy, cx] = gw

    heatmaps = {cid: Heatmap(arr) for cid, arr in maps.items()}
    return heatmaps, SizeTargets(h_map, w_map, pos)


def encode_segmentation(
    instances: Sequence[Instance],
    img_w: float,
    img_h: float,
    cfg: EncodeConfig,
    categories: Iterable[int] | None = None,
) -> tuple[dict[int, Heatmap], SizeTargets]:
    """Same as detection, with each box replaced by its mask's enclosure."""
    boxed = []
    for inst in instances:
        if inst.mask is None:
            raise ValueError("segmentation encoding needs a mask per instance")
        boxed.append(
            Instance(
                category=inst.category,
                box=mask_to_box(inst.mask),
                mask=inst.mask,
                keypoints=inst.keypoints,
                score=inst.score,
            )
        )
    return encode_detection(boxed, img_w, img_h, cfg, categories)


def encode_keypoints(
    instances: Sequence[Instance],
    keypoint_category: int,
    img_w: float,
    img_h: float,
    cfg: EncodeConfig,
) -> Heatmap:
    """Fixed-spread Gaussian per labeled keypoint of one keypoint category.

    Occluded-but-annotated keypoints are encoded like visible ones; absent
    ones contribute nothing.
    """
    grid = cfg.grid
    heat = Heatmap.zeros(grid, grid)
    for inst in instances:
        if inst.keypoints is None:
            continue
        if not (0 <= keypoint_category < len(inst.keypoints)):
            raise ValueError(
                f"keypoint category {keypoint_category} out of range "
                f"for instance with {len(inst.keypoints)} keypoints"
            )
        kp = inst.keypoints[keypoint_category]
        if kp.visibility == Visibility.ABSENT:
            continue
        gx = kp.x * grid / img_w
        gy = kp.y * grid / img_h
        arr = splat_gaussian(heat, (gx, gy), cfg.keypoint_sigma).data.copy()
        cx, cy = center_cell(gx, gy, grid)
        arr[cy, cx] = 1.0
        heat = Heatmap(arr)
    return heat
