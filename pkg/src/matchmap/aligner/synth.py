"""Synthetic embedding generation standing in for a real vision/language
front end.

Scenes are rendered directly in embedding space: grid cells covered by an
object take that class's prototype vector (plus Gaussian noise), remaining
cells take a background prototype.  Query embeddings are the prototypes
themselves, so the aligner's job reduces to dense vector matching.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..grid import Instance


@dataclass(frozen=True, eq=False)
class Prototypes:
    """Unit-norm query/content vectors for classes, background, keypoints."""

    class_vecs: np.ndarray  # (n_classes, dim)
    background: np.ndarray  # (dim,)
    keypoint_vecs: np.ndarray  # (n_keypoints, dim)

    @property
    def dim(self) -> int:
        return self.class_vecs.shape[1]

    @property
    def n_classes(self) -> int:
        return self.class_vecs.shape[0]

    def loc_for_class(self, category: int) -> np.ndarray:
        return self.class_vecs[category]

    def loc_for_keypoint(self, keypoint_category: int) -> np.ndarray:
        return self.keypoint_vecs[keypoint_category]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Prototypes):
            return NotImplemented
        return (
            np.array_equal(self.class_vecs, other.class_vecs)
            and np.array_equal(self.background, other.background)
            and np.array_equal(self.keypoint_vecs, other.keypoint_vecs)
        )


def make_prototypes(
    n_classes: int, n_keypoints: int, dim: int, seed: int = 0
) -> Prototypes:
    """Random unit vectors; in high dimension these are far from collinear."""
    rng = np.random.default_rng(seed)
    vecs = rng.normal(size=(n_classes + 1 + n_keypoints, dim))
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    return Prototypes(
        class_vecs=vecs[:n_classes],
        background=vecs[n_classes],
        keypoint_vecs=vecs[n_classes + 1 :],
    )


def synth_embeddings(
    scene: Sequence[Instance],
    img_w: float,
    img_h: float,
    grid: int,
    prototypes: Prototypes,
    noise_sigma: float,
    seed: int | np.random.Generator,
) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    """Embed a scene onto the grid.

    A cell belongs to an instance when the cell's center lies inside the
    instance's box (later instances win overlaps).  Returns the
    ``(grid, grid, dim)`` embedding tensor and the per-class query map for
    every class present.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dim = prototypes.dim
    emb = np.tile(prototypes.background, (grid, grid, 1))
    centers_x = (np.arange(grid) + 0.5) * img_w / grid
    centers_y = (np.arange(grid) + 0.5) * img_h / grid
    for inst in scene:
        in_x = (centers_x >= inst.box.x0) & (centers_x < inst.box.x1)
        in_y = (centers_y >= inst.box.y0) & (centers_y < inst.box.y1)
        emb[np.ix_(in_y, in_x)] = prototypes.class_vecs[inst.category]
    if noise_sigma > 0.0:
        emb = emb + rng.normal(0.0, noise_sigma, size=(grid, grid, dim))
    locs = {inst.category: prototypes.class_vecs[inst.category] for inst in scene}
    return emb, locs
