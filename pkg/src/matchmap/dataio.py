"""Dataset loading, synthetic scene generation, conversation templates and
binary grid serialization.

Annotation files use a COCO-style JSON subset: ``images`` /
``annotations`` / ``categories`` arrays, boxes as ``[x, y, w, h]``, masks
as polygons or dense 0/1 grids, keypoints as flat ``x, y, v`` triples.
Grid files ("LUMH") hold float32 payloads: magic, version, rows, cols,
channels, then row-major channel-minor values.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .grid import (
    BinaryMask,
    Box,
    Heatmap,
    Instance,
    Keypoint,
    TaskKind,
    Visibility,
)

LUMH_MAGIC = b"LUMH"
LUMH_VERSION = 1
_LUMH_HEADER = struct.Struct("<4s4I")


class DataFormatError(ValueError):
    """Raised for malformed annotation or grid files."""


@dataclass(frozen=True)
class ImageInfo:
    id: int
    width: int
    height: int
    source: str | None = None


@dataclass(eq=False)
class Dataset:
    images: tuple[ImageInfo, ...]
    annotations: dict[int, tuple[Instance, ...]]
    categories: dict[int, str]
    keypoint_names: tuple[str, ...] = ()
    keypoint_kappas: tuple[float, ...] = ()

    def image(self, image_id: int) -> ImageInfo:
        for info in self.images:
            if info.id == image_id:
                return info
        raise KeyError(f"no image with id {image_id}")

    def instances(self, image_id: int) -> tuple[Instance, ...]:
        return self.annotations.get(image_id, ())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.images == other.images
            and self.annotations == other.annotations
            and self.categories == other.categories
            and self.keypoint_names == other.keypoint_names
            and self.keypoint_kappas == other.keypoint_kappas
        )


# ---------------------------------------------------------------------------
# annotation files


def _polygon_mask(rings: list, rows: int, cols: int) -> BinaryMask:
    """Rasterize polygon rings (flat x,y lists) by pixel-center crossing test."""
    bits = np.zeros((rows, cols), dtype=bool)
    cx = np.arange(cols) + 0.5
    cy = np.arange(rows) + 0.5
    px, py = np.meshgrid(cx, cy)
    for ring in rings:
        xs = np.asarray(ring[0::2], dtype=np.float64)
        ys = np.asarray(ring[1::2], dtype=np.float64)
        if xs.size < 3:
            raise DataFormatError("polygon ring needs at least 3 vertices")
        inside = np.zeros((rows, cols), dtype=bool)
        n = xs.size
        for i in range(n):
            x0, y0 = xs[i], ys[i]
            x1, y1 = xs[(i + 1) % n], ys[(i + 1) % n]
            crosses = (y0 <= py) != (y1 <= py)
            with np.errstate(divide="ignore", invalid="ignore"):
                x_at = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
            inside ^= crosses & (px < x_at)
        bits |= inside
    return BinaryMask(bits)


def _parse_mask(seg, rows: int, cols: int) -> BinaryMask:
    if isinstance(seg, dict):
        size = seg.get("size")
        flat = seg.get("bits")
        if (
            not isinstance(size, list)
            or len(size) != 2
            or not isinstance(flat, list)
            or len(flat) != size[0] * size[1]
        ):
            raise DataFormatError("dense mask needs 'size' [h, w] and matching 'bits'")
        return BinaryMask(np.asarray(flat).reshape(size[0], size[1]))
    if isinstance(seg, list) and seg and all(isinstance(r, list) for r in seg):
        return _polygon_mask(seg, rows, cols)
    raise DataFormatError("segmentation must be polygon rings or a dense grid")


def _parse_keypoints(flat: list) -> tuple[Keypoint, ...]:
    if len(flat) % 3 != 0:
        raise DataFormatError("keypoints must be flat x,y,v triples")
    kps = []
    for i in range(0, len(flat), 3):
        x, y, v = flat[i], flat[i + 1], flat[i + 2]
        if v not in (0, 1, 2):
            raise DataFormatError(f"keypoint visibility must be 0/1/2, got {v}")
        kps.append(Keypoint(float(x), float(y), Visibility(v)))
    return tuple(kps)


def parse_annotations(obj: dict) -> Dataset:
    """Validate and convert a parsed COCO-subset dictionary."""
    for key in ("images", "annotations", "categories"):
        if key not in obj or not isinstance(obj[key], list):
            raise DataFormatError(f"missing or invalid '{key}' array")

    images = []
    image_dims: dict[int, tuple[int, int]] = {}
    for i, rec in enumerate(obj["images"]):
        try:
            info = ImageInfo(
                id=int(rec["id"]),
                width=int(rec["width"]),
                height=int(rec["height"]),
                source=rec.get("source"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataFormatError(f"images[{i}]: {exc}") from exc
        if info.id in image_dims:
            raise DataFormatError(f"images[{i}]: duplicate image id {info.id}")
        if info.width <= 0 or info.height <= 0:
            raise DataFormatError(f"images[{i}]: non-positive dimensions")
        images.append(info)
        image_dims[info.id] = (info.width, info.height)

    categories: dict[int, str] = {}
    kp_names: tuple[str, ...] = ()
    kp_kappas: tuple[float, ...] = ()
    for i, rec in enumerate(obj["categories"]):
        try:
            cid, name = int(rec["id"]), str(rec["name"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataFormatError(f"categories[{i}]: {exc}") from exc
        if cid in categories:
            raise DataFormatError(f"categories[{i}]: duplicate category id {cid}")
        categories[cid] = name
        if "keypoints" in rec:
            names = tuple(str(n) for n in rec["keypoints"])
            kappas = tuple(float(k) for k in rec.get("kappas", (0.1,) * len(names)))
            if len(kappas) != len(names):
                raise DataFormatError(f"categories[{i}]: kappas do not match keypoints")
            if kp_names and (names != kp_names or kappas != kp_kappas):
                raise DataFormatError(
                    f"categories[{i}]: conflicting keypoint schema across categories"
                )
            kp_names, kp_kappas = names, kappas

    annotations: dict[int, list[Instance]] = {}
    for i, rec in enumerate(obj["annotations"]):
        where = f"annotations[{i}]"
        try:
            image_id = int(rec["image_id"])
            category = int(rec["category_id"])
            bbox = rec["bbox"]
        except (KeyError, TypeError, ValueError) as exc:
            raise DataFormatError(f"{where}: {exc}") from exc
        if image_id not in image_dims:
            raise DataFormatError(f"{where}: unknown image id {image_id}")
        if category not in categories:
            raise DataFormatError(f"{where}: unknown category id {category}")
        if not (isinstance(bbox, list) and len(bbox) == 4):
            raise DataFormatError(f"{where}: bbox must be [x, y, w, h]")
        x, y, w, h = (float(v) for v in bbox)
        if w <= 0 or h <= 0 or not all(math.isfinite(v) for v in (x, y, w, h)):
            raise DataFormatError(f"{where}: malformed bbox {bbox}")
        img_w, img_h = image_dims[image_id]
        mask = None
        if rec.get("segmentation") is not None:
            try:
                mask = _parse_mask(rec["segmentation"], img_h, img_w)
            except DataFormatError as exc:
                raise DataFormatError(f"{where}: {exc}") from exc
        keypoints = None
        if rec.get("keypoints") is not None:
            try:
                keypoints = _parse_keypoints(rec["keypoints"])
            except DataFormatError as exc:
                raise DataFormatError(f"{where}: {exc}") from exc
            if kp_names and len(keypoints) != len(kp_names):
                raise DataFormatError(
                    f"{where}: expected {len(kp_names)} keypoints, got {len(keypoints)}"
                )
        score = float(rec.get("score", 1.0))
        if not (0.0 <= score <= 1.0):
            raise DataFormatError(f"{where}: score must be in [0, 1]")
        try:
            inst = Instance(
                category=category,
                box=Box(x, y, x + w, y + h),
                mask=mask,
                keypoints=keypoints,
                score=score,
            )
        except ValueError as exc:
            raise DataFormatError(f"{where}: {exc}") from exc
        annotations.setdefault(image_id, []).append(inst)

    return Dataset(
        images=tuple(images),
        annotations={k: tuple(v) for k, v in annotations.items()},
        categories=categories,
        keypoint_names=kp_names,
        keypoint_kappas=kp_kappas,
    )


def load_annotations(path: str | Path) -> Dataset:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(obj, dict):
        raise DataFormatError(f"{path}: top level must be an object")
    return parse_annotations(obj)


def dataset_to_obj(dataset: Dataset) -> dict:
    images = [
        {
            "id": info.id,
            "width": info.width,
            "height": info.height,
            **({"source": info.source} if info.source is not None else {}),
        }
        for info in dataset.images
    ]
    categories = []
    for cid in sorted(dataset.categories):
        rec: dict = {"id": cid, "name": dataset.categories[cid]}
        if dataset.keypoint_names:
            rec["keypoints"] = list(dataset.keypoint_names)
            rec["kappas"] = list(dataset.keypoint_kappas)
        categories.append(rec)
    annotations = []
    ann_id = 1
    for image_id in sorted(dataset.annotations):
        for inst in dataset.annotations[image_id]:
            box = inst.box
            rec = {
                "id": ann_id,
                "image_id": image_id,
                "category_id": inst.category,
                "bbox": [box.x0, box.y0, box.width, box.height],
                "score": inst.score,
            }
            if inst.mask is not None:
                rec["segmentation"] = {
                    "size": [inst.mask.rows, inst.mask.cols],
                    "bits": inst.mask.bits.astype(int).reshape(-1).tolist(),
                }
            if inst.keypoints is not None:
                flat: list[float] = []
                for kp in inst.keypoints:
                    flat.extend([kp.x, kp.y, int(kp.visibility)])
                rec["keypoints"] = flat
            annotations.append(rec)
            ann_id += 1
    return {"images": images, "annotations": annotations, "categories": categories}


def write_annotations(dataset: Dataset, path: str | Path) -> None:
    payload = json.dumps(dataset_to_obj(dataset), sort_keys=True, separators=(",", ":"))
    Path(path).write_text(payload + "\n")


# ---------------------------------------------------------------------------
# grid files


def write_heatmap(path: str | Path, grids: np.ndarray | Sequence[np.ndarray] | Heatmap) -> None:
    """Write one or more same-shape 2d grids as channels of one LUMH file."""
    if isinstance(grids, Heatmap):
        stacked = grids.data[:, :, None]
    else:
        arr = np.asarray(grids, dtype=np.float64) if not isinstance(grids, np.ndarray) else grids
        if isinstance(grids, (list, tuple)):
            planes = [g.data if isinstance(g, Heatmap) else np.asarray(g) for g in grids]
            stacked = np.stack(planes, axis=-1)
        elif arr.ndim == 2:
            stacked = arr[:, :, None]
        elif arr.ndim == 3:
            stacked = arr
        else:
            raise ValueError("grids must be 2d, 3d, or a sequence of 2d arrays")
    if not np.isfinite(stacked).all():
        raise ValueError("grid values must be finite")
    rows, cols, channels = stacked.shape
    header = _LUMH_HEADER.pack(LUMH_MAGIC, LUMH_VERSION, rows, cols, channels)
    Path(path).write_bytes(header + stacked.astype("<f4").tobytes())


def read_heatmap(path: str | Path) -> np.ndarray:
    """Read a LUMH file into a float32 array of shape (rows, cols, channels)."""
    blob = Path(path).read_bytes()
    if len(blob) < _LUMH_HEADER.size:
        raise DataFormatError(f"{path}: truncated header")
    magic, version, rows, cols, channels = _LUMH_HEADER.unpack_from(blob)
    if magic != LUMH_MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}")
    if version != LUMH_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    n = rows * cols * channels
    expected = _LUMH_HEADER.size + 4 * n
    if len(blob) != expected:
        raise DataFormatError(f"{path}: expected {expected} bytes, found {len(blob)}")
    flat = np.frombuffer(blob, dtype="<f4", count=n, offset=_LUMH_HEADER.size)
    return flat.reshape(rows, cols, channels).copy()


# ---------------------------------------------------------------------------
# synthetic scenes


# box-relative keypoint anchors per class (cycled when there are more classes)
SYNTH_KEYPOINT_NAMES = ("core", "anchor")
SYNTH_KEYPOINT_OFFSETS = (
    ((0.5, 0.5), (0.3, 0.3)),
    ((0.5, 0.5), (0.7, 0.35)),
    ((0.5, 0.5), (0.5, 0.75)),
)


@dataclass(frozen=True)
class SynthConfig:
    n_images: int = 100
    grid: int = 32
    img_size: int = 448
    classes: tuple[str, ...] = ("circle", "square", "triangle")
    objects_per_image: tuple[int, int] = (2, 4)
    min_center_separation: float = 6.0
    size_range: tuple[float, float] = (4.0, 10.0)
    noise_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_images < 0:
            raise ValueError("n_images must be nonnegative")
        if self.min_center_separation < 2.0:
            raise ValueError("min_center_separation must be >= 2 cells")
        lo, hi = self.objects_per_image
        if not (1 <= lo <= hi):
            raise ValueError("objects_per_image must be an increasing range from >= 1")
        slo, shi = self.size_range
        if not (0.5 <= slo <= shi <= self.grid):
            raise ValueError("size_range must fit the grid")


def synth_shapes(cfg: SynthConfig, max_tries: int = 200) -> Dataset:
    """Deterministic random scenes with exact boxes and keypoints.

    Object centers are rejection-sampled in grid units so every pair stays
    ``min_center_separation`` apart; sizes and classes are uniform.  Each
    instance carries the two synthetic keypoints at class-specific
    box-relative anchors.
    """
    rng = np.random.default_rng(cfg.seed)
    stride = cfg.img_size / cfg.grid
    images = []
    annotations: dict[int, tuple[Instance, ...]] = {}
    for image_id in range(1, cfg.n_images + 1):
        images.append(ImageInfo(id=image_id, width=cfg.img_size, height=cfg.img_size))
        n_objects = int(rng.integers(cfg.objects_per_image[0], cfg.objects_per_image[1] + 1))
        centers: list[tuple[float, float]] = []
        instances: list[Instance] = []
        for _ in range(n_objects):
            placed = False
            for _attempt in range(max_tries):
                w = float(rng.uniform(*cfg.size_range))
                h = float(rng.uniform(*cfg.size_range))
                cx = float(rng.uniform(w / 2, cfg.grid - w / 2))
                cy = float(rng.uniform(h / 2, cfg.grid - h / 2))
                if all(
                    math.hypot(cx - ox, cy - oy) >= cfg.min_center_separation
                    for ox, oy in centers
                ):
                    placed = True
                    break
            if not placed:
                raise RuntimeError(
                    f"image {image_id}: could not place {n_objects} objects with "
                    f"separation {cfg.min_center_separation} after {max_tries} tries"
                )
            centers.append((cx, cy))
            category = int(rng.integers(0, len(cfg.classes)))
            box = Box(
                (cx - w / 2) * stride,
                (cy - h / 2) * stride,
                (cx + w / 2) * stride,
                (cy + h / 2) * stride,
            )
            offsets = SYNTH_KEYPOINT_OFFSETS[category % len(SYNTH_KEYPOINT_OFFSETS)]
            keypoints = tuple(
                Keypoint(box.x0 + u * box.width, box.y0 + v * box.height)
                for u, v in offsets
            )
            instances.append(Instance(category=category, box=box, keypoints=keypoints))
        annotations[image_id] = tuple(instances)
    return Dataset(
        images=tuple(images),
        annotations=annotations,
        categories={i: name for i, name in enumerate(cfg.classes)},
        keypoint_names=SYNTH_KEYPOINT_NAMES,
        keypoint_kappas=(0.1,) * len(SYNTH_KEYPOINT_NAMES),
    )


# ---------------------------------------------------------------------------
# conversation templates


@dataclass(frozen=True)
class ConversationSample:
    instruction: str
    response: str
    task: TaskKind
    description: str
    format: str


_TASK_TOKEN = {
    TaskKind.DETECT: "[DET]",
    TaskKind.GROUND: "[GROUND]",
    TaskKind.SEGMENT: "[SEG]",
    TaskKind.REF_SEGMENT: "[REFSEG]",
    TaskKind.POSE: "[POINT]",
}

_TASK_FORMAT = {
    TaskKind.DETECT: "boxes",
    TaskKind.GROUND: "boxes",
    TaskKind.SEGMENT: "masks",
    TaskKind.REF_SEGMENT: "masks",
    TaskKind.POSE: "points",
}


def render_conversation(task: TaskKind, description: str) -> ConversationSample:
    """Instantiate the shared instruction/response template for a task."""
    if not description:
        raise ValueError("description must be nonempty")
    if task not in _TASK_TOKEN:
        raise ValueError(f"task {task.value} has no conversation token")
    fmt = _TASK_FORMAT[task]
    instruction = (
        f"USER: [IMG]. Please find the location of {description}. "
        f"Respond with {fmt}."
    )
    response = (
        f"ASSISTANT: Sure, the location is [LOC]. "
        f"The task output is {_TASK_TOKEN[task]}."
    )
    return ConversationSample(
        instruction=instruction,
        response=response,
        task=task,
        description=description,
        format=fmt,
    )
