"""Command-line interface wiring the full pipeline.

Subcommands: ``synth`` (emit a synthetic dataset plus embeddings),
``encode`` (annotations -> target grids), ``train`` (fit the aligner),
``decode`` (checkpoint or grid files -> task outputs), ``eval``
(predictions vs ground truth -> report plus figures), ``count`` (heatmap
-> integer) and ``demo`` (the whole loop).  Exit codes: 0 success, 1 usage
error, 2 data error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .aligner import (
    AlignerConfig,
    Prototypes,
    TrainConfig,
    aligner_forward,
    init_model,
    load_checkpoint,
    make_prototypes,
    save_checkpoint,
    train,
)
from .aligner.model import AlignerOutput
from .dataio import (
    DataFormatError,
    Dataset,
    SynthConfig,
    dataset_to_obj,
    load_annotations,
    read_heatmap,
    synth_shapes,
    write_annotations,
    write_heatmap,
)
from .decode import DecodeConfig, decode_task
from .demo import DemoConfig, DemoSampleBank, run_demo, scene_embeddings
from .encode import EncodeConfig, encode_detection, encode_keypoints, encode_segmentation
from .grid import Box, Heatmap, Instance, LogitGrid, TaskKind
from .metrics import (
    MatchSpec,
    OksParams,
    cumulative_iou,
    detection_map,
    keypoint_map,
    report_lines,
    report_to_dict,
    segmentation_map,
)

TASK_NAMES = {t.value: t for t in TaskKind}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="matchmap", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parser_class=_Parser, help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-images", type=int, default=20)
    p.add_argument("--grid", type=int, default=32)
    p.add_argument("--img-size", type=int, default=448)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--noise-sigma", type=float, default=0.1)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--skip-embeddings", action="store_true")

    p = sub.add_parser("encode", parser_class=_Parser, help="annotations to target grids")
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", type=int, default=32)
    p.add_argument("--task", choices=["detect", "segment", "pose"], default="detect")

    p = sub.add_parser("train", parser_class=_Parser, help="fit the aligner")
    p.add_argument("--data", required=True, help="directory produced by synth")
    p.add_argument("--checkpoint", required=True, help="output model file")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--grid", type=int, default=32)
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--figures", action="store_true", help="also write loss_curve.png")

    p = sub.add_parser("decode", parser_class=_Parser, help="grids or model to task outputs")
    p.add_argument("--task", choices=sorted(TASK_NAMES), required=True)
    p.add_argument("--out", required=True, help="predictions JSON path")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--nms-iou", type=float, default=0.5)
    p.add_argument("--threshold", type=float, default=0.05)
    p.add_argument("--encoded", help="directory produced by the encode subcommand")
    p.add_argument("--checkpoint", help="model checkpoint (needs --data)")
    p.add_argument("--data", help="synth directory for checkpoint decoding")

    p = sub.add_parser("eval", parser_class=_Parser, help="score predictions")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--metric", choices=["box", "mask", "oks", "ciou"], default="box")
    p.add_argument("--out", help="directory for report files and figures")

    p = sub.add_parser("count", parser_class=_Parser, help="count peaks in a heatmap file")
    p.add_argument("--heatmap", required=True)
    p.add_argument("--channel", type=int, default=0)
    p.add_argument("--threshold", type=float, default=0.3)

    p = sub.add_parser("demo", parser_class=_Parser, help="synth, train, decode, eval")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--train-scenes", type=int, default=500)
    p.add_argument("--eval-scenes", type=int, default=100)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--grid", type=int, default=32)
    p.add_argument("--lr", type=float, default=3e-3)
    return parser


def _load_synth_dir(data_dir: Path) -> tuple[Dataset, Prototypes, dict]:
    manifest_path = data_dir / "manifest.json"
    if not manifest_path.exists():
        raise DataFormatError(f"{manifest_path}: missing synth manifest")
    manifest = json.loads(manifest_path.read_text())
    dataset = load_annotations(data_dir / manifest["annotations"])
    raw = read_heatmap(data_dir / manifest["prototypes"]).astype(np.float64)
    n_classes = int(manifest["n_classes"])
    n_kp = int(manifest["n_keypoints"])
    flat = raw[:, :, 0]
    prototypes = Prototypes(
        class_vecs=flat[:n_classes],
        background=flat[n_classes],
        keypoint_vecs=flat[n_classes + 1 : n_classes + 1 + n_kp],
    )
    return dataset, prototypes, manifest


def cmd_synth(args: argparse.Namespace) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = ("circle", "square", "triangle", "star", "cross", "ring")
    if not (1 <= args.classes <= len(names)):
        raise UsageError(f"--classes must be in 1..{len(names)}")
    cfg = SynthConfig(
        n_images=args.n_images,
        grid=args.grid,
        img_size=args.img_size,
        classes=names[: args.classes],
        noise_sigma=args.noise_sigma,
        seed=args.seed,
    )
    dataset = synth_shapes(cfg)
    write_annotations(dataset, out / "annotations.json")
    prototypes = make_prototypes(
        len(cfg.classes), len(dataset.keypoint_names), args.dim, seed=args.seed
    )
    stacked = np.concatenate(
        [prototypes.class_vecs, prototypes.background[None, :], prototypes.keypoint_vecs]
    )
    write_heatmap(out / "prototypes.lumh", stacked[:, :, None])
    manifest = {
        "annotations": "annotations.json",
        "prototypes": "prototypes.lumh",
        "n_classes": len(cfg.classes),
        "n_keypoints": len(dataset.keypoint_names),
        "grid": args.grid,
        "dim": args.dim,
        "noise_sigma": args.noise_sigma,
        "seed": args.seed,
        "embeddings": {},
    }
    if not args.skip_embeddings:
        emb_dir = out / "embeddings"
        emb_dir.mkdir(exist_ok=True)
        for info in dataset.images:
            emb = scene_embeddings(
                dataset, info.id, prototypes, args.grid, args.noise_sigma, args.seed
            )
            name = f"embeddings/img_{info.id:04d}.lumh"
            write_heatmap(out / name, emb)
            manifest["embeddings"][str(info.id)] = name
    (out / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, separators=(",", ":")) + "\n"
    )
    print(f"wrote {len(dataset.images)} scenes to {out}")
    return 0


def cmd_encode(args: argparse.Namespace) -> int:
    dataset = load_annotations(args.annotations)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = EncodeConfig(grid=args.grid)
    categories = sorted(dataset.categories)
    manifest: dict = {
        "grid": args.grid,
        "task": args.task,
        "categories": categories,
        "images": [],
    }
    for info in dataset.images:
        instances = list(dataset.instances(info.id))
        entry = {"id": info.id, "width": info.width, "height": info.height}
        if args.task == "pose":
            n_kp = len(dataset.keypoint_names)
            planes = [
                encode_keypoints(instances, k, info.width, info.height, cfg).data
                for k in range(n_kp)
            ]
            name = f"img_{info.id:04d}.kp.lumh"
            write_heatmap(out / name, np.stack(planes, axis=-1))
            entry["keypoint_heatmap"] = name
        else:
            encoder = encode_detection if args.task == "detect" else encode_segmentation
            heatmaps, size = encoder(
                instances, info.width, info.height, cfg, categories=categories
            )
            name = f"img_{info.id:04d}.heatmap.lumh"
            write_heatmap(out / name, np.stack([heatmaps[c].data for c in categories], axis=-1))
            entry["heatmap"] = name
            size_name = f"img_{info.id:04d}.size.lumh"
            write_heatmap(
                out / size_name,
                np.stack([size.h_map, size.w_map, size.pos_mask.astype(float)], axis=-1),
            )
            entry["size"] = size_name
        manifest["images"].append(entry)
    (out / "targets.json").write_text(
        json.dumps(manifest, sort_keys=True, separators=(",", ":")) + "\n"
    )
    print(f"encoded {len(dataset.images)} images into {out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    data_dir = Path(args.data)
    dataset, prototypes, manifest = _load_synth_dir(data_dir)
    if prototypes.dim != args.dim:
        raise DataFormatError(
            f"prototype dim {prototypes.dim} does not match --dim {args.dim}"
        )
    bank = DemoSampleBank(
        dataset, prototypes, args.grid, float(manifest["noise_sigma"]), int(manifest["seed"])
    )
    model = init_model(
        AlignerConfig(dim=args.dim, grid=args.grid, blocks=args.blocks), seed=args.seed
    )
    model, curve = train(
        model,
        bank,
        TrainConfig(steps=args.steps, lr=args.lr, batch_size=args.batch_size, seed=args.seed),
    )
    save_checkpoint(model, args.checkpoint)
    if args.figures:
        from . import figures

        figures.save_loss_curve(curve, Path(args.checkpoint).with_suffix(".loss.png"))
    print(f"final loss {curve[-1]:.6f} over {args.steps} steps; saved {args.checkpoint}")
    return 0


def _predictions_to_json(
    preds: dict[int, list[Instance]], dims: dict[int, tuple[int, int]], path: Path
) -> None:
    images = [
        {"id": img_id, "width": dims[img_id][0], "height": dims[img_id][1]}
        for img_id in sorted(preds)
    ]
    categories = sorted({p.category for insts in preds.values() for p in insts})
    obj = {
        "images": images,
        "categories": [{"id": c, "name": f"category_{c}"} for c in categories],
        "annotations": [],
    }
    ann_id = 1
    for img_id in sorted(preds):
        for inst in preds[img_id]:
            obj["annotations"].append(
                {
                    "id": ann_id,
                    "image_id": img_id,
                    "category_id": inst.category,
                    "bbox": [inst.box.x0, inst.box.y0, inst.box.width, inst.box.height],
                    "score": inst.score,
                }
            )
            ann_id += 1
    path.write_text(json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n")


def cmd_decode(args: argparse.Namespace) -> int:
    task = TASK_NAMES[args.task]
    cfg = DecodeConfig(k=args.k, nms_iou=args.nms_iou, score_threshold=args.threshold)
    preds: dict[int, list[Instance]] = {}
    dims: dict[int, tuple[int, int]] = {}

    if args.encoded:
        if task not in (TaskKind.DETECT, TaskKind.GROUND, TaskKind.SEGMENT, TaskKind.COUNT):
            raise UsageError(f"--encoded decoding does not support task {args.task}")
        enc_dir = Path(args.encoded)
        manifest = json.loads((enc_dir / "targets.json").read_text())
        categories = manifest["categories"]
        grid = manifest["grid"]
        total = 0
        for entry in manifest["images"]:
            img_id = entry["id"]
            dims[img_id] = (entry["width"], entry["height"])
            heat = read_heatmap(enc_dir / entry["heatmap"]).astype(np.float64)
            size = read_heatmap(enc_dir / entry["size"]).astype(np.float64)
            preds[img_id] = []
            for ci, cid in enumerate(categories):
                heatmap = Heatmap(np.clip(heat[:, :, ci], 0.0, 1.0))
                if task == TaskKind.COUNT:
                    result = decode_task(heatmap, task, cfg, *dims[img_id])
                    total += result.count or 0
                    continue
                # package ground-truth grids as a pseudo model output
                with np.errstate(divide="ignore"):
                    logits = np.log(heatmap.data) - np.log1p(-heatmap.data)
                logits = np.clip(logits, -30.0, 30.0)
                output = AlignerOutput(
                    LogitGrid(logits), size[:, :, 0], size[:, :, 1]
                )
                result = decode_task(output, task, cfg, *dims[img_id])
                for box, score in result.boxes:
                    preds[img_id].append(Instance(category=cid, box=box, score=score))
                for prompt in result.prompts:
                    preds[img_id].append(
                        Instance(category=cid, box=prompt.box, score=prompt.score)
                    )
        if task == TaskKind.COUNT:
            print(total)
            return 0
    elif args.checkpoint:
        if not args.data:
            raise UsageError("--checkpoint decoding needs --data")
        if task == TaskKind.COUNT:
            raise UsageError("use the count subcommand for counting")
        model = load_checkpoint(args.checkpoint)
        dataset, prototypes, manifest = _load_synth_dir(Path(args.data))
        for info in dataset.images:
            dims[info.id] = (info.width, info.height)
            emb_name = manifest.get("embeddings", {}).get(str(info.id))
            if emb_name:
                emb = read_heatmap(Path(args.data) / emb_name).astype(np.float64)
            else:
                emb = scene_embeddings(
                    dataset, info.id, prototypes, manifest["grid"],
                    float(manifest["noise_sigma"]), int(manifest["seed"]),
                )
            preds[info.id] = []
            for cid in sorted(dataset.categories):
                output, _ = aligner_forward(model, emb, prototypes.loc_for_class(cid))
                result = decode_task(output, task, cfg, info.width, info.height)
                for box, score in result.boxes:
                    preds[info.id].append(Instance(category=cid, box=box, score=score))
                for prompt in result.prompts:
                    preds[info.id].append(
                        Instance(category=cid, box=prompt.box, score=prompt.score)
                    )
    else:
        raise UsageError("decode needs --encoded or --checkpoint")

    _predictions_to_json(preds, dims, Path(args.out))
    n = sum(len(v) for v in preds.values())
    print(f"wrote {n} predictions to {args.out}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    pred_ds = load_annotations(args.pred)
    gt_ds = load_annotations(args.gt)
    preds = {info.id: list(pred_ds.instances(info.id)) for info in pred_ds.images}
    gts = {info.id: list(gt_ds.instances(info.id)) for info in gt_ds.images}

    if args.metric == "ciou":
        pred_masks = []
        gt_masks = []
        for img_id in sorted(gts):
            p_list = preds.get(img_id, [])
            for i, gt in enumerate(gts[img_id]):
                if gt.mask is None:
                    raise DataFormatError(f"image {img_id}: ground truth lacks masks")
                if i < len(p_list) and p_list[i].mask is not None:
                    pred_masks.append(p_list[i].mask)
                else:
                    raise DataFormatError(
                        f"image {img_id}: prediction {i} missing paired mask"
                    )
                gt_masks.append(gt.mask)
        value = cumulative_iou(pred_masks, gt_masks)
        print(f"ciou={value!r}")
        if args.out:
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            (out / "report.txt").write_text(f"ciou={value!r}\n")
            (out / "report.json").write_text(
                json.dumps({"ciou": value}, sort_keys=True) + "\n"
            )
        return 0

    if args.metric == "box":
        report = detection_map(preds, gts)
    elif args.metric == "mask":
        report = segmentation_map(preds, gts)
    else:
        n_kp = len(gt_ds.keypoint_names)
        if n_kp == 0:
            raise DataFormatError("oks metric needs a keypoint schema in the ground truth")
        kappas = gt_ds.keypoint_kappas or (0.1,) * n_kp
        report = keypoint_map(preds, gts, OksParams(kappas=tuple(kappas)))

    text = "\n".join(report_lines(report)) + "\n"
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(text)
        (out / "report.json").write_text(
            json.dumps(report_to_dict(report), sort_keys=True, separators=(",", ":")) + "\n"
        )
        from . import figures

        figures.save_metric_bars({args.metric: report}, out / "metrics.png")
    return 0


def cmd_count(args: argparse.Namespace) -> int:
    grids = read_heatmap(args.heatmap).astype(np.float64)
    if not (0 <= args.channel < grids.shape[2]):
        raise UsageError(f"--channel must be in 0..{grids.shape[2] - 1}")
    heatmap = Heatmap(np.clip(grids[:, :, args.channel], 0.0, 1.0))
    cfg = DecodeConfig(score_threshold=args.threshold)
    result = decode_task(heatmap, TaskKind.COUNT, cfg, heatmap.cols, heatmap.rows)
    print(result.count)
    return 0


def cmd_demo(args: argparse.Namespace) -> int:
    cfg = DemoConfig(
        seed=args.seed,
        steps=args.steps,
        train_scenes=args.train_scenes,
        eval_scenes=args.eval_scenes,
        dim=args.dim,
        grid=args.grid,
        lr=args.lr,
    )
    result = run_demo(cfg, Path(args.out))
    print(result.report_text, end="")
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "encode": cmd_encode,
    "train": cmd_train,
    "decode": cmd_decode,
    "eval": cmd_eval,
    "count": cmd_count,
    "demo": cmd_demo,
}


def cli_main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataFormatError, FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
