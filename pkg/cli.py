"""
opaseg command line.

Subcommands: phantom, fuse, agree, train, predict and report. Each one
writes its outputs into --out atomically, next to a single manifest.json.
"""
import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Sequence, Tuple

# Add current directory to path so modules can be imported
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import config

# BLAS reads its thread caps when numpy is first imported
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ[_var] = str(config.THREADS)

import numpy as np
from pydantic import BaseModel, ValidationError
from rich.console import Console
from rich.logging import RichHandler
from rich.panel import Panel
from rich.progress import BarColumn, Progress, SpinnerColumn, TextColumn
from rich.table import Table

from modules.checkpoint import (
    load_checkpoint,
    load_probabilities,
    predict_volume,
    save_checkpoint,
    save_probabilities,
)
from modules.errors import InvalidInputError, NumericalError, OpasegError, VolumeIOError
from modules.label_fusion import SoftLabel, fuse, save_soft_label
from modules.metrics import UNDEFINED, agreement, opacity_from_probs, summarize
from modules.phantom import PhantomStudy, generate_cohort, simulate_panel
from modules.preprocessing import volume_to_batch
from modules.reporting import (
    RunManifest,
    config_hash,
    format_value,
    save_overlay,
    utc_now,
    write_agreement_csv,
    write_epoch_log_csv,
    write_manifest,
    write_metrics_csv,
)
from modules.segnet import SegNet
from modules.splitting import split_scans
from modules.taxonomy import REPRESENTATIVE_CLASS, ClassTaxonomy
from modules.training import TrainConfig, TrainingData, train
from modules.volume import LabelMask, class_to_group
from modules.volume_io import atomic_write_text, dump_json, load_mask, load_volume, save_mask, save_volume

console = Console(stderr=True)
logger = logging.getLogger("opaseg")

VOLUME_NAME = "volume.ctv"
TRUTH_NAME = "truth.msk"
ANNOTATOR_GLOB = "annotator_*.msk"

ERROR_KINDS = {1: "validation", 2: "io", 3: "numerical"}


def setup_logging(level: str) -> None:
    logging.basicConfig(
        level=level.upper(),
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, show_path=False)],
        force=True,
    )


def parse_groups(text: str) -> Tuple[int, ...]:
    try:
        groups = tuple(int(g) for g in text.split(",") if g.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"Opacity groups must be comma-separated integers, got {text!r}")
    if not groups or any(g not in range(5) for g in groups):
        raise argparse.ArgumentTypeError(f"Opacity groups must lie in 0..4, got {text!r}")
    return groups


def load_model(path: str, model_cls):
    """Validate a JSON config file into a pydantic model; defaults when no file is given."""
    if path is None:
        return model_cls()
    source = Path(path)
    if not source.is_file():
        raise VolumeIOError(f"Missing config file: {source}")
    try:
        return model_cls.model_validate_json(source.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise InvalidInputError(f"Invalid config {source}: {e}") from e


def hash_of(settings) -> str:
    if isinstance(settings, BaseModel):
        settings = settings.model_dump(mode="json")
    return config_hash(dump_json(settings).encode("utf-8"))


def finish(args, out: Path, inputs: Sequence, settings, seed: int = None) -> None:
    manifest = RunManifest(
        command=args.command,
        inputs=[str(p) for p in inputs],
        config_hash=hash_of(settings),
        seed=seed,
        started_at=args.started_at,
        finished_at=utc_now(),
    )
    write_manifest(out, manifest)
    console.print(Panel.fit(f"Wrote {args.command} outputs to {out}", title="opaseg", style="bold blue"))


def load_masks(paths: Sequence[str], taxonomy: ClassTaxonomy) -> List[LabelMask]:
    return [load_mask(p, taxonomy) for p in paths]


def cmd_phantom(args) -> None:
    """Phantom volumes, exact truth and a simulated annotator panel per scan."""
    settings = load_model(args.config, PhantomStudy).model_dump()
    overrides = {"n_scans": args.scans, "n_annotators": args.annotators}
    settings.update({k: v for k, v in overrides.items() if v is not None})
    if args.seed is not None:
        settings["phantom"]["seed"] = args.seed
    study = PhantomStudy.model_validate(settings)

    out = Path(args.out)
    taxonomy = ClassTaxonomy()
    cohort = generate_cohort(study.phantom, study.n_scans)
    with Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        transient=True,
        console=console
    ) as progress:
        task = progress.add_task("[cyan]Generating phantoms...", total=len(cohort))
        for scan_id, spec, volume, truth in cohort:
            scan_dir = out / scan_id
            save_volume(scan_dir / VOLUME_NAME, volume)
            save_mask(scan_dir / TRUTH_NAME, truth)
            panel = simulate_panel(
                truth, study.annotator, study.n_annotators, spec.seed + study.annotator.seed, taxonomy
            )
            for mask in panel:
                save_mask(scan_dir / f"{mask.annotator_id}.msk", mask)
            groups = taxonomy.groups_for(truth.labels)
            for z in range(volume.depth):
                save_overlay(scan_dir / "overlays" / f"truth_{z:03d}.png", volume.slice(z), groups[z])
            logger.info("%s: %d annotators, seed %d", scan_id, len(panel), spec.seed)
            progress.update(task, advance=1)

    finish(args, out, [args.config] if args.config else [], study, seed=study.phantom.seed)


def cmd_fuse(args) -> None:
    """Class- and group-level soft labels plus the consensus mask."""
    out = Path(args.out)
    taxonomy = ClassTaxonomy()
    masks = load_masks(args.masks, taxonomy)
    by_class = fuse(masks, taxonomy)
    by_group = fuse(masks, taxonomy, by_group=True)
    save_soft_label(out / "fused_class.soft", by_class)
    save_soft_label(out / "fused_group.soft", by_group)
    consensus = LabelMask(
        labels=by_class.hard_labels(),
        annotator_id="consensus",
        spacing_mm=masks[0].spacing_mm,
        taxonomy=taxonomy,
    )
    save_mask(out / "consensus.msk", consensus)
    logger.info("Fused %d masks, %d supported pixels", len(masks), int(by_class.supported.sum()))
    finish(args, out, args.masks, {"command": "fuse"})


def cmd_agree(args) -> None:
    """Inter-observer opacity IOU matrix."""
    out = Path(args.out)
    taxonomy = ClassTaxonomy()
    matrix = agreement(load_masks(args.masks, taxonomy), args.opacity_groups, taxonomy)
    write_agreement_csv(out / "agreement.csv", matrix)

    above = int((matrix.vs_average > matrix.max_peer_iou()).sum())
    logger.info(
        "%d of %d annotators agree better with the average than with any peer",
        above, len(matrix.annotator_ids)
    )
    finish(args, out, args.masks, {"opacity_groups": list(args.opacity_groups)})


def discover_scans(data_dir: Path) -> List[Path]:
    if not data_dir.is_dir():
        raise VolumeIOError(f"Missing data directory: {data_dir}")
    scans = sorted(p for p in data_dir.iterdir() if (p / VOLUME_NAME).exists())
    if not scans:
        raise InvalidInputError(f"No scan directories with {VOLUME_NAME} under {data_dir}")
    return scans


def load_scan(scan_dir: Path, taxonomy: ClassTaxonomy) -> Tuple[np.ndarray, SoftLabel]:
    """Normalized slices and group-level fused labels of one scan directory."""
    volume = load_volume(scan_dir / VOLUME_NAME)
    paths = sorted(scan_dir.glob(ANNOTATOR_GLOB))
    if not paths:
        raise InvalidInputError(f"No annotator masks ({ANNOTATOR_GLOB}) in {scan_dir}")
    masks = load_masks(paths, taxonomy)
    for mask in masks:
        mask.check_aligned(volume)
    return volume_to_batch(volume), fuse(masks, taxonomy, by_group=True)


def stack_labelled(scans: Sequence[Tuple[np.ndarray, SoftLabel]]) -> Tuple[np.ndarray, SoftLabel]:
    """Concatenate the slices of several scans that carry any label."""
    keep = [soft.supported.any(axis=(1, 2)) for _, soft in scans]
    images = np.concatenate([img[k] for (img, _), k in zip(scans, keep)])
    soft = SoftLabel(
        mean=np.concatenate([s.mean[k] for (_, s), k in zip(scans, keep)]),
        std=np.concatenate([s.std[k] for (_, s), k in zip(scans, keep)]),
        support=np.concatenate([s.support[k] for (_, s), k in zip(scans, keep)]),
        n_annotators=max(s.n_annotators for _, s in scans),
        classes=scans[0][1].classes,
    )
    return images, soft


def cmd_train(args) -> None:
    """Fuse, split and train; keep the best-validation checkpoint."""
    cfg = load_model(args.config, TrainConfig)
    if args.seed is not None:
        cfg = cfg.model_copy(update={
            "seed": args.seed, "network": cfg.network.model_copy(update={"seed": args.seed})
        })
    if args.opacity_groups is not None:
        cfg = cfg.model_copy(update={"opacity_groups": args.opacity_groups})

    out = Path(args.out)
    taxonomy = ClassTaxonomy()
    scan_dirs = {p.name: p for p in discover_scans(Path(args.data_dir))}
    split = split_scans(list(scan_dirs), cfg.test_ids, cfg.val_fraction, cfg.seed)
    logger.info("Split: %s", split.sizes())

    images, soft = stack_labelled([load_scan(scan_dirs[s], taxonomy) for s in split.train])
    val_images, val_soft = stack_labelled([load_scan(scan_dirs[s], taxonomy) for s in split.val])
    if len(images) == 0:
        raise InvalidInputError("Training scans carry no labelled slices")
    data = TrainingData.from_soft_labels(
        images,
        soft,
        val_images,
        val_soft.hard_labels(),
        cfg.use_confidence_weights,
        cfg.confidence_epsilon,
    )
    net = SegNet(cfg.network)
    logger.info("Training on %d slices, validating on %d", len(data.images), len(data.val_images))

    with Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        BarColumn(),
        TextColumn("{task.completed}/{task.total}"),
        transient=True,
        console=console
    ) as progress:
        task = progress.add_task("[cyan]Training...", total=cfg.epochs)

        def on_epoch(record):
            progress.update(
                task, advance=1,
                description=f"[cyan]epoch {record.epoch} val opacity IOU {format_value(record.val_opacity_iou)}"
            )

        try:
            result = train(net, data, cfg, on_epoch=on_epoch)
        except NumericalError as e:
            if e.checkpoint is not None:
                net.set_flat_params(e.checkpoint)
                save_checkpoint(out / "last_good.ckpt", net, e.epoch or 0, UNDEFINED)
            raise

    save_checkpoint(out / "model.ckpt", result.net, result.best_epoch, result.best_val_opacity_iou)
    write_epoch_log_csv(out / "epochs.csv", result.log)
    atomic_write_text(out / "split.json", dump_json({
        "train": list(split.train), "val": list(split.val), "test": list(split.test)
    }))
    finish(args, out, [args.data_dir] + ([args.config] if args.config else []), cfg, seed=cfg.seed)


def cmd_predict(args) -> None:
    """Group probabilities, argmax mask and overlays for one volume."""
    out = Path(args.out)
    taxonomy = ClassTaxonomy()
    net, header = load_checkpoint(args.checkpoint)
    volume = load_volume(args.volume)
    group_ids = tuple(taxonomy.group_ids)
    if net.config.n_classes != len(group_ids):
        raise InvalidInputError(
            f"Checkpoint predicts {net.config.n_classes} classes, expected {len(group_ids)} groups"
        )

    with Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        transient=True,
        console=console
    ) as progress:
        progress.add_task("[cyan]Predicting...", total=None)
        probs = predict_volume(net, volume)

    save_probabilities(out / "probs.prob", probs, group_ids)
    best = np.argmax(probs, axis=1)
    groups = np.asarray(group_ids)[best]
    # Stored at class level so every .msk file decodes the same way
    lut = np.array([REPRESENTATIVE_CLASS[g] for g in group_ids], dtype=np.int8)
    prediction = LabelMask(
        labels=lut[best],
        annotator_id="prediction",
        spacing_mm=volume.spacing_mm,
        taxonomy=taxonomy,
    )
    save_mask(out / "prediction.msk", prediction)
    for z in range(volume.depth):
        save_overlay(out / "overlays" / f"pred_{z:03d}.png", volume.slice(z), groups[z])
    logger.info("Predicted %d slices with checkpoint from epoch %s", volume.depth, header.get("epoch"))
    finish(args, out, [args.checkpoint, args.volume], {"checkpoint": header})


def cmd_report(args) -> None:
    """Per-group IOU, opacity IOU, relative volume and %WAL for one prediction."""
    out = Path(args.out)
    taxonomy = ClassTaxonomy()
    gt_groups = class_to_group(load_mask(args.gt, taxonomy)).labels

    pred_opacity = None
    if Path(args.pred).suffix == ".prob":
        probs, group_ids = load_probabilities(args.pred)
        pred_groups = np.asarray(group_ids)[np.argmax(probs, axis=1)]
        pred_opacity = opacity_from_probs(probs, group_ids, args.opacity_groups)
    else:
        pred_groups = class_to_group(load_mask(args.pred, taxonomy)).labels
    if pred_groups.shape != gt_groups.shape:
        raise InvalidInputError(
            f"Prediction shape {pred_groups.shape} does not match ground truth {gt_groups.shape}"
        )

    scan = args.scan or Path(args.gt).parent.name or "scan"
    rows = summarize(pred_groups, gt_groups, pred_opacity, args.opacity_groups)
    write_metrics_csv(out / "metrics.csv", [(scan, m, t, v) for m, t, v in rows])

    table = Table(title=f"Metrics for {scan}")
    for column in ("metric", "target", "value"):
        table.add_column(column)
    for metric, target, value in rows:
        table.add_row(metric, target, format_value(value))
    console.print(table)
    finish(args, out, [args.pred, args.gt], {"opacity_groups": list(args.opacity_groups)})


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, help="Output directory")
    common.add_argument("--seed", type=int, default=None, help="Override the configured seed")
    common.add_argument("--config", default=None, help="JSON configuration file")
    common.add_argument(
        "--opacity-groups", type=parse_groups, default=None,
        help="Comma-separated opacity groups (default from OPACITY_GROUPS, \"2,3,4\")"
    )
    common.add_argument("--log-level", default=config.LOG_LEVEL, help="Logging level")

    parser = argparse.ArgumentParser(prog="opaseg", description="Pulmonary opacity segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", parents=[common], help="Generate phantoms and simulated annotators")
    p.add_argument(
        "--scans", type=int, default=None,
        help="Number of scans (default 2; train needs at least two for its scan-level split)"
    )
    p.add_argument("--annotators", type=int, default=None, help="Annotators per scan")
    p.set_defaults(handler=cmd_phantom)

    p = sub.add_parser("fuse", parents=[common], help="Fuse annotator masks into soft labels")
    p.add_argument("masks", nargs="+", help="Annotator .msk files")
    p.set_defaults(handler=cmd_fuse)

    p = sub.add_parser("agree", parents=[common], help="Inter-observer agreement matrix")
    p.add_argument("masks", nargs="+", help="Annotator .msk files")
    p.set_defaults(handler=cmd_agree)

    p = sub.add_parser("train", parents=[common], help="Train a segmentation network")
    p.add_argument("data_dir", help="Directory of scan directories")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="Predict group probabilities for a volume")
    p.add_argument("checkpoint", help="Checkpoint file")
    p.add_argument("volume", help="CT volume (.ctv)")
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser("report", parents=[common], help="Score a prediction against ground truth")
    p.add_argument("pred", help="Prediction (.prob or .msk)")
    p.add_argument("gt", help="Ground-truth mask (.msk)")
    p.add_argument("--scan", default=None, help="Scan name in the report")
    p.set_defaults(handler=cmd_report)
    return parser


def fail(code: int, message: str) -> int:
    sys.stderr.write(f"opaseg: error code={code} kind={ERROR_KINDS[code]} message={json.dumps(message)}\n")
    return code


def main(argv: Sequence[str] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    if args.opacity_groups is None and args.command != "train":
        args.opacity_groups = config.OPACITY_GROUPS
    args.started_at = utc_now()

    try:
        args.handler(args)
    except OpasegError as e:
        logger.debug("Command failed", exc_info=True)
        return fail(e.exit_code, str(e))
    except ValidationError as e:
        return fail(1, str(e))
    except OSError as e:
        return fail(2, str(e))
    return 0


if __name__ == "__main__":
    sys.exit(main())
