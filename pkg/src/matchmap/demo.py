"""End-to-end toy pipeline: synthetic scenes -> trained aligner -> decoded
tasks -> evaluation report.

Everything is driven by one seed.  Scene embeddings are regenerated
deterministically on demand (never materialized in bulk), detection
queries cover every class in the universe so absent-class suppression is
learned, and pose runs the top-down protocol on per-instance crops.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .aligner import (
    AlignerConfig,
    AlignerModel,
    Prototypes,
    TrainConfig,
    TrainSample,
    aligner_forward,
    init_model,
    make_prototypes,
    synth_embeddings,
    train,
)
from .dataio import Dataset, SynthConfig, synth_shapes
from .decode import DecodeConfig, crop_for_pose, decode_task
from .encode import EncodeConfig, SizeTargets, encode_detection, encode_keypoints
from .grid import Box, Heatmap, Instance, Keypoint, TaskKind, Visibility
from .metrics import (
    EvalReport,
    OksParams,
    detection_map,
    keypoint_map,
    report_lines,
    report_to_dict,
)


@dataclass(frozen=True)
class DemoConfig:
    seed: int = 7
    train_scenes: int = 500
    eval_scenes: int = 100
    classes: tuple[str, ...] = ("circle", "square", "triangle")
    grid: int = 32
    img_size: int = 448
    dim: int = 64
    blocks: int = 2
    steps: int = 2000
    lr: float = 3e-3
    batch_size: int = 4
    noise_sigma: float = 0.1
    detect_threshold: float = 0.05
    filter_threshold: float = 0.3
    min_center_separation: float = 6.0


@dataclass
class DemoResult:
    model: AlignerModel
    loss_curve: list[float]
    reports: dict[str, EvalReport]
    scalars: dict[str, float]
    report_text: str


def _seed_ints(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def demo_datasets(cfg: DemoConfig) -> tuple[Dataset, Dataset, Prototypes]:
    """Seeded train/eval scene splits plus shared prototype vectors."""
    s_train, s_eval, s_proto = _seed_ints(cfg.seed, 3)
    base = SynthConfig(
        n_images=cfg.train_scenes,
        grid=cfg.grid,
        img_size=cfg.img_size,
        classes=cfg.classes,
        min_center_separation=cfg.min_center_separation,
        noise_sigma=cfg.noise_sigma,
        seed=s_train,
    )
    train_ds = synth_shapes(base)
    eval_ds = synth_shapes(
        SynthConfig(
            n_images=cfg.eval_scenes,
            grid=cfg.grid,
            img_size=cfg.img_size,
            classes=cfg.classes,
            min_center_separation=cfg.min_center_separation,
            noise_sigma=0.0,
            seed=s_eval,
        )
    )
    n_kp = len(train_ds.keypoint_names)
    prototypes = make_prototypes(len(cfg.classes), n_kp, cfg.dim, seed=s_proto)
    return train_ds, eval_ds, prototypes


def scene_embeddings(
    dataset: Dataset,
    image_id: int,
    prototypes: Prototypes,
    grid: int,
    noise_sigma: float,
    embed_seed: int,
) -> np.ndarray:
    """Deterministic embeddings for one full scene."""
    info = dataset.image(image_id)
    rng = np.random.default_rng([embed_seed, image_id, 0])
    emb, _ = synth_embeddings(
        dataset.instances(image_id), info.width, info.height, grid,
        prototypes, noise_sigma, rng,
    )
    return emb


def crop_embeddings(
    instance: Instance,
    prototypes: Prototypes,
    grid: int,
    noise_sigma: float,
    seed_key: list[int],
) -> np.ndarray:
    """Embeddings for a box crop; the object fills the whole crop."""
    box = instance.box
    crop_inst = Instance(
        category=instance.category,
        box=Box(0.0, 0.0, box.width, box.height),
    )
    rng = np.random.default_rng(seed_key)
    emb, _ = synth_embeddings(
        [crop_inst], box.width, box.height, grid, prototypes, noise_sigma, rng
    )
    return emb


class DemoSampleBank(Sequence[TrainSample]):
    """Lazy training samples: one detection query per (scene, class) and one
    pose query per (instance, keypoint); embeddings are rebuilt on access."""

    def __init__(
        self,
        dataset: Dataset,
        prototypes: Prototypes,
        grid: int,
        noise_sigma: float,
        embed_seed: int,
    ):
        self.dataset = dataset
        self.prototypes = prototypes
        self.grid = grid
        self.noise_sigma = noise_sigma
        self.embed_seed = embed_seed
        self.encode_cfg = EncodeConfig(grid=grid)
        self.index: list[tuple] = []
        for info in dataset.images:
            for cid in sorted(dataset.categories):
                self.index.append(("det", info.id, cid))
            for inst_i, inst in enumerate(dataset.instances(info.id)):
                for kp_i in range(len(inst.keypoints or ())):
                    self.index.append(("pose", info.id, inst_i, kp_i))

    def __len__(self) -> int:
        return len(self.index)

    def __getitem__(self, i: int) -> TrainSample:
        entry = self.index[i]
        if entry[0] == "det":
            _, image_id, cid = entry
            info = self.dataset.image(image_id)
            selected = [x for x in self.dataset.instances(image_id) if x.category == cid]
            heatmaps, size = encode_detection(
                selected, info.width, info.height, self.encode_cfg, categories=[cid]
            )
            emb = scene_embeddings(
                self.dataset, image_id, self.prototypes, self.grid,
                self.noise_sigma, self.embed_seed,
            )
            return TrainSample(
                image_embeddings=emb,
                loc_embedding=self.prototypes.loc_for_class(cid),
                target=heatmaps[cid],
                size=size,
            )
        _, image_id, inst_i, kp_i = entry
        inst = self.dataset.instances(image_id)[inst_i]
        box = inst.box
        kp = (inst.keypoints or ())[kp_i]
        crop_kp = Keypoint(kp.x - box.x0, kp.y - box.y0, kp.visibility)
        crop_inst = Instance(
            category=inst.category,
            box=Box(0.0, 0.0, box.width, box.height),
            keypoints=tuple(
                crop_kp if j == kp_i else Keypoint(0.0, 0.0, Visibility.ABSENT)
                for j in range(len(inst.keypoints or ()))
            ),
        )
        target = encode_keypoints(
            [crop_inst], kp_i, box.width, box.height, self.encode_cfg
        )
        emb = crop_embeddings(
            inst, self.prototypes, self.grid, self.noise_sigma,
            [self.embed_seed, image_id, inst_i + 1, kp_i],
        )
        return TrainSample(
            image_embeddings=emb,
            loc_embedding=self.prototypes.loc_for_keypoint(kp_i),
            target=target,
            size=SizeTargets.zeros(self.grid),
        )


def train_demo_model(
    cfg: DemoConfig, train_ds: Dataset, prototypes: Prototypes
) -> tuple[AlignerModel, list[float]]:
    _, _, _, s_model, s_train, s_embed = _seed_ints(cfg.seed, 6)
    bank = DemoSampleBank(train_ds, prototypes, cfg.grid, cfg.noise_sigma, s_embed)
    model = init_model(
        AlignerConfig(dim=cfg.dim, grid=cfg.grid, blocks=cfg.blocks), seed=s_model
    )
    train_cfg = TrainConfig(
        steps=cfg.steps, lr=cfg.lr, batch_size=cfg.batch_size, seed=s_train
    )
    return train(model, bank, train_cfg)


def evaluate_model(
    model: AlignerModel,
    eval_ds: Dataset,
    prototypes: Prototypes,
    cfg: DemoConfig,
) -> tuple[dict[str, EvalReport], dict[str, float]]:
    """Detection AP, top-down keypoint AP, counting and absence filtering."""
    grid = cfg.grid
    encode_cfg = EncodeConfig(grid=grid)
    detect_cfg = DecodeConfig(score_threshold=cfg.detect_threshold)
    filter_cfg = DecodeConfig(score_threshold=cfg.filter_threshold)

    det_preds: dict[int, list[Instance]] = {}
    gts: dict[int, list[Instance]] = {
        info.id: list(eval_ds.instances(info.id)) for info in eval_ds.images
    }
    count_hits = 0
    count_gt_exact = 0
    absence_scenes = 0
    absence_clean = 0

    for info in eval_ds.images:
        emb = scene_embeddings(eval_ds, info.id, prototypes, grid, 0.0, cfg.seed)
        present = {x.category for x in eval_ds.instances(info.id)}
        preds: list[Instance] = []
        model_count = 0
        scene_clean = True
        has_absent = False
        for cid in sorted(eval_ds.categories):
            output, _ = aligner_forward(model, emb, prototypes.loc_for_class(cid))
            result = decode_task(output, TaskKind.DETECT, detect_cfg, info.width, info.height)
            for box, score in result.boxes:
                preds.append(Instance(category=cid, box=box, score=score))
            if cid in present:
                counted = decode_task(
                    output.heatmap, TaskKind.COUNT, filter_cfg, info.width, info.height
                )
                model_count += counted.count or 0
            else:
                has_absent = True
                filtered = decode_task(
                    output, TaskKind.DETECT, filter_cfg, info.width, info.height
                )
                if filtered.boxes:
                    scene_clean = False
        det_preds[info.id] = preds

        true_count = len(eval_ds.instances(info.id))
        if abs(model_count - true_count) <= 1:
            count_hits += 1
        gt_count = 0
        per_class = {
            cid: [x for x in eval_ds.instances(info.id) if x.category == cid]
            for cid in present
        }
        for cid, insts in per_class.items():
            heatmaps, _ = encode_detection(insts, info.width, info.height, encode_cfg)
            counted = decode_task(
                heatmaps[cid], TaskKind.COUNT, filter_cfg, info.width, info.height
            )
            gt_count += counted.count or 0
        if gt_count == true_count:
            count_gt_exact += 1
        if has_absent:
            absence_scenes += 1
            if scene_clean:
                absence_clean += 1

    # top-down pose over ground-truth person boxes
    pose_preds: dict[int, list[Instance]] = {}
    pose_gts: dict[int, list[Instance]] = {}
    n_kp = len(eval_ds.keypoint_names)
    oks_params = OksParams.uniform(n_kp)
    unit = 0
    for info in eval_ds.images:
        for inst_i, inst in enumerate(eval_ds.instances(info.id)):
            if inst.keypoints is None:
                continue
            transform = crop_for_pose(info.width, info.height, inst.box)
            found: list[Keypoint] = []
            scores: list[float] = []
            for kp_i in range(n_kp):
                emb = crop_embeddings(
                    inst, prototypes, grid, 0.0, [cfg.seed, info.id, inst_i + 1, kp_i]
                )
                output, _ = aligner_forward(model, emb, prototypes.loc_for_keypoint(kp_i))
                result = decode_task(
                    output.heatmap,
                    TaskKind.POSE,
                    filter_cfg,
                    inst.box.width,
                    inst.box.height,
                )
                cx, cy, score = result.keypoints[0]
                fx, fy = transform.apply(cx, cy)
                found.append(Keypoint(fx, fy))
                scores.append(score)
            pose_gts[unit] = [inst]
            pose_preds[unit] = [
                Instance(
                    category=inst.category,
                    box=inst.box,
                    keypoints=tuple(found),
                    score=float(np.clip(np.mean(scores), 0.0, 1.0)),
                )
            ]
            unit += 1

    reports = {
        "detect": detection_map(det_preds, gts),
        "pose": keypoint_map(pose_preds, pose_gts, oks_params),
    }
    n_scenes = len(eval_ds.images)
    scalars = {
        "count.gt_exact_rate": count_gt_exact / n_scenes if n_scenes else 0.0,
        "count.model_within1_rate": count_hits / n_scenes if n_scenes else 0.0,
        "absence.scenes": float(absence_scenes),
        "absence.clean_rate": absence_clean / absence_scenes if absence_scenes else 1.0,
    }
    return reports, scalars


def format_report(
    reports: dict[str, EvalReport], scalars: dict[str, float]
) -> str:
    lines: list[str] = []
    for name in sorted(reports):
        lines.extend(report_lines(reports[name], prefix=name))
    lines.extend(f"{k}={repr(v) if isinstance(v, float) else v}" for k, v in sorted(scalars.items()))
    return "\n".join(lines) + "\n"


def run_demo(cfg: DemoConfig, out_dir: str | Path | None = None) -> DemoResult:
    """Full pipeline; optionally writes report files and figures."""
    train_ds, eval_ds, prototypes = demo_datasets(cfg)
    model, curve = train_demo_model(cfg, train_ds, prototypes)
    reports, scalars = evaluate_model(model, eval_ds, prototypes, cfg)
    scalars = dict(scalars)
    scalars["train.final_loss"] = curve[-1] if curve else 0.0
    scalars["train.steps"] = float(cfg.steps)
    scalars["seed"] = float(cfg.seed)
    text = format_report(reports, scalars)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(text)
        payload = {name: report_to_dict(rep) for name, rep in reports.items()}
        payload["scalars"] = scalars
        (out / "report.json").write_text(
            json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n"
        )
        from . import figures  # lazy: pulls in matplotlib

        figures.save_loss_curve(curve, out / "loss_curve.png")
        figures.save_metric_bars(reports, out / "metrics.png")
        info = eval_ds.images[0]
        emb = scene_embeddings(eval_ds, info.id, prototypes, cfg.grid, 0.0, cfg.seed)
        cid = sorted({x.category for x in eval_ds.instances(info.id)})[0]
        output, _ = aligner_forward(model, emb, prototypes.loc_for_class(cid))
        target, _ = encode_detection(
            [x for x in eval_ds.instances(info.id) if x.category == cid],
            info.width, info.height, EncodeConfig(grid=cfg.grid),
        )
        result = decode_task(
            output, TaskKind.DETECT, DecodeConfig(score_threshold=cfg.filter_threshold),
            info.width, info.height,
        )
        figures.save_heatmap_figure(
            {"predicted": output.heatmap, "target": target[cid]},
            out / "heatmap_sample.png",
            boxes=result.boxes,
            stride=info.width / cfg.grid,
        )
    return DemoResult(model, curve, reports, scalars, text)
