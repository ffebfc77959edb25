"""``cellweight`` command line: synth -> prepare -> train -> detect -> evaluate.

All stages read one YAML run config (``--config``) plus ``--set key=value``
overrides and write into ``<workdir>/<stage>/`` together with the resolved
config. Exit codes: 0 ok, 2 config error, 3 data error, 4 training diverged.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .annotations import AnnotationError, census, make_classes, split_regions
from .config import ConfigError, RunConfig, dump_config, load_config
from .evaluate import (
    classification_metrics,
    combine_reports,
    format_table,
    match_detections,
    per_class_detection_report,
    recall_by_gt_class,
    sweep_regions,
    write_json,
)
from .infer import (
    annotated_crops,
    classify_cells,
    extract_centers,
    predict_map,
    read_detections,
    write_detections,
)
from .nets import ClassifierSpec, DetectorSpec, load_model
from .synthdata import SynthConfig, generate_dataset, read_region, write_region
from .targetgen import (
    WeightKind,
    WeightStrategy,
    background_weight,
    extract_patches,
    make_reference,
    make_weight,
    read_samples,
    write_samples,
)
from .train import TrainConfig, TrainingDiverged, train_classifier, train_detector

logger = logging.getLogger("cellweight")

EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 2, 3, 4
SPLITS = ("train", "val", "test")


class DataError(Exception):
    pass


def _stage_dir(cfg: RunConfig, stage: str) -> Path:
    d = cfg.root / stage
    d.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, d / "config.yaml")
    return d


def _regions_dir(cfg: RunConfig) -> Path:
    return Path(cfg.prepare.regions_dir) if cfg.prepare.regions_dir else cfg.root / "synth" / "regions"


def _load_regions(cfg: RunConfig, ids: list[str] | None = None):
    classes = make_classes(list(cfg.classes))
    rdir = _regions_dir(cfg)
    paths = sorted(rdir.glob("*.csv")) if ids is None else [rdir / f"{i}.csv" for i in ids]
    if not paths:
        raise DataError(f"no region annotations found in {rdir}")
    for p in paths:
        if not p.exists():
            raise DataError(f"missing region file {p}")
    return classes, [read_region(p, classes) for p in paths]


def _read_json(path: Path) -> dict:
    if not path.exists():
        raise DataError(f"missing upstream artifact {path}; run the earlier stage first")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def cmd_synth(cfg: RunConfig) -> Path:
    out = _stage_dir(cfg, "synth")
    s = cfg.synth
    synth_cfg = SynthConfig(
        canvas=s.canvas,
        class_palette={k: tuple(v) for k, v in s.class_palette.items()},
        class_frequencies={k: s.class_frequencies[k] for k in cfg.classes},
        cell_radius_mean=s.cell_radius_mean,
        cell_radius_sigma=s.cell_radius_sigma,
        cells_per_region=s.cells_per_region,
        noise_sigma=s.noise_sigma,
        color_jitter=s.color_jitter,
        background=tuple(s.background),
        texture_amplitude=s.texture_amplitude,
        texture_scale_px=s.texture_scale_px,
        min_separation_px=s.min_separation_px,
        seed=cfg.seed,
        micron_per_pixel=s.micron_per_pixel,
    )
    for image, dots in generate_dataset(synth_cfg, s.n_regions):
        write_region(out / "regions", image, dots)
    logger.info("wrote %d regions to %s", s.n_regions, out / "regions")
    return out


def cmd_prepare(cfg: RunConfig) -> Path:
    out = _stage_dir(cfg, "prepare")
    p = cfg.prepare
    classes, regions = _load_regions(cfg)
    by_id = {d.region_id: (img, d) for img, d in regions}
    splits = split_regions([d for _, d in regions], p.fractions, cfg.seed)
    split_ids = {name: [d.region_id for d in part] for name, part in zip(SPLITS, splits)}
    train_census = census(splits[0], classes)
    strategy = WeightStrategy(WeightKind(p.strategy), train_census, p.radius_px)
    weights = strategy.class_weights()
    write_json(split_ids, out / "splits.json")
    write_json(
        {
            "counts": {c.name: n for c, n in train_census.counts.items()},
            "total": train_census.total,
            "strategy": strategy.kind.value,
            "class_weights": {c.name: w for c, w in weights.items()},
            "background_weight": background_weight(strategy),
        },
        out / "census.json",
    )

    for name in SPLITS:
        samples = []
        for rid in split_ids[name]:
            image, dots = by_id[rid]
            ref = make_reference(dots, p.radius_px)
            w = make_weight(dots, strategy)
            samples += extract_patches(image, ref, w, p.patch_size, p.stride, region_id=rid)
        write_samples(samples, out / "samples" / name)
        (out / "classifier").mkdir(exist_ok=True)
        images, labels = annotated_crops([by_id[rid] for rid in split_ids[name]])
        np.savez(out / "classifier" / f"{name}.npz", images=images, labels=labels)
        logger.info("%s: %d regions, %d patches", name, len(split_ids[name]), len(samples))
    return out


def _train_config(cfg: RunConfig, checkpoint_dir: Path) -> TrainConfig:
    t = cfg.train
    return TrainConfig(
        strategy=cfg.prepare.strategy,
        batch_size=t.batch_size,
        max_epochs=t.max_epochs,
        early_stop_patience=t.early_stop_patience,
        seed=cfg.seed,
        learning_rate=t.learning_rate,
        augment=t.augment,
        checkpoint_dir=str(checkpoint_dir),
        data_dir=str(cfg.root / "prepare"),
    )


def cmd_train(cfg: RunConfig, model: str = "both") -> Path:
    out = _stage_dir(cfg, "models")
    prep = cfg.root / "prepare"
    torch.set_num_threads(1)
    if model in ("detector", "both"):
        train = read_samples(prep / "samples" / "train")
        val = read_samples(prep / "samples" / "val")
        if not train or not val:
            raise DataError("detector training needs prepared train and val samples")
        size = cfg.prepare.patch_size
        spec = DetectorSpec((size, size, 3), cfg.detector.levels, cfg.detector.base_filters, cfg.detector.batch_norm)
        report = train_detector(train, val, _train_config(cfg, out / "detector"), spec)
        write_json(report.to_dict(), out / "detector" / "report.json")
    if model in ("classifier", "both"):
        info = _read_json(prep / "census.json")
        class_weights = [info["class_weights"][c] for c in cfg.classes]
        tr = np.load(prep / "classifier" / "train.npz")
        va = np.load(prep / "classifier" / "val.npz")
        spec = ClassifierSpec((28, 28, 3), cfg.classifier.conv_filters, (cfg.classifier.hidden_units, len(cfg.classes)))
        report = train_classifier(
            (tr["images"], tr["labels"]), (va["images"], va["labels"]), class_weights,
            _train_config(cfg, out / "classifier"), spec,
        )
        write_json(report.to_dict(), out / "classifier" / "report.json")
    return out


def _maybe_model(path: Path):
    return load_model(path) if path.exists() else None


def cmd_detect(cfg: RunConfig) -> Path:
    out = _stage_dir(cfg, "detections")
    d = cfg.detect
    split_ids = _read_json(cfg.root / "prepare" / "splits.json")
    classes, regions = _load_regions(cfg, split_ids["test"])
    det_path = cfg.root / "models" / "detector" / "detector_best.pt"
    if not det_path.exists():
        raise DataError(f"missing detector checkpoint {det_path}")
    detector = load_model(det_path)
    classifier = _maybe_model(cfg.root / "models" / "classifier" / "classifier_best.pt") if d.classify else None
    for image, dots in regions:
        prob = predict_map(detector, image, d.tile, d.overlap, region_id=dots.region_id)
        result = extract_centers(prob, d.threshold, d.min_distance)
        if classifier is not None:
            result = classify_cells(classifier, image, result, classes)
        write_detections(result, out / f"{dots.region_id}.csv")
    return out


def cmd_evaluate(cfg: RunConfig) -> Path:
    out = _stage_dir(cfg, "reports")
    e = cfg.evaluate
    split_ids = _read_json(cfg.root / "prepare" / "splits.json")
    classes, regions = _load_regions(cfg, split_ids["test"])
    pairs = []
    for image, gt in regions:
        path = cfg.root / "detections" / f"{gt.region_id}.csv"
        if not path.exists():
            raise DataError(f"missing detections {path}")
        pairs.append((read_detections(path, classes), gt))

    best_cap, sweep = sweep_regions(pairs, e.caps)
    at_cap = combine_reports(match_detections(d, g, e.cap_px) for d, g in pairs)
    found: dict[str, list[int]] = {c.name: [0, 0] for c in classes}
    for dets, gt in pairs:
        for c, (m, n) in recall_by_gt_class(dets, gt, best_cap).items():
            found[c.name][0] += m
            found[c.name][1] += n
    summary = {
        "strategy": cfg.prepare.strategy,
        "test_regions": [gt.region_id for _, gt in pairs],
        "best_cap_px": best_cap,
        "best": sweep[best_cap].summary(),
        "at_cap": at_cap.summary(),
        "sweep": [sweep[c].summary() for c in sorted(sweep)],
        "recall_by_gt_class": {k: {"found": m, "total": n, "recall": m / n if n else None} for k, (m, n) in found.items()},
    }
    rows = {f"{cfg.prepare.strategy} (best cap)": sweep[best_cap], f"{cfg.prepare.strategy} (cap {e.cap_px:g})": at_cap}

    if all(all(d.cell_class is not None for d in dets.centers) for dets, _ in pairs):
        per_class = {c: [] for c in classes}
        for dets, gt in pairs:
            for c, rep in per_class_detection_report(dets, gt, best_cap).items():
                per_class[c].append(rep)
        pooled = {c.name: combine_reports(reps) for c, reps in per_class.items() if reps}
        summary["per_class"] = {k: r.summary() for k, r in pooled.items()}
        rows.update({f"  {k}": r for k, r in pooled.items()})

    classifier = _maybe_model(cfg.root / "models" / "classifier" / "classifier_best.pt")
    cls_report = None
    if classifier is not None:
        crops, y_true = annotated_crops(regions)
        if len(np.unique(y_true)) >= 2:
            with torch.no_grad():
                probs = classifier(torch.from_numpy(crops)).numpy()
            cls_report = classification_metrics(y_true, probs)
            summary["classification"] = {"positions": "annotations", **cls_report.summary(list(cfg.classes))}

    write_json(summary, out / "summary.json")
    (out / "table.txt").write_text(format_table(rows, "Cell detection performance"), encoding="utf-8")
    if e.plots:
        _plots(out, sweep, cls_report, list(cfg.classes))
    return out


def _plots(out: Path, sweep, cls_report, class_names):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    caps = sorted(sweep)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for key in ("precision", "recall", "f1"):
        ax.plot(caps, [getattr(sweep[c], key) for c in caps], marker="o", ms=3, label=key)
    ax.set_xlabel("matching distance cap (px)")
    ax.set_ylim(0, 1.02)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "pr_vs_cap.png", metadata={"Software": None})
    plt.close(fig)

    if cls_report is not None:
        fig, ax = plt.subplots(figsize=(4, 4))
        for k, (fpr, tpr) in cls_report.roc.items():
            ax.plot(fpr, tpr, label=f"{class_names[k]} (AUC {cls_report.auc[k]:.3f})")
        ax.plot([0, 1], [0, 1], "k:", lw=0.8)
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(out / "roc.png", metadata={"Software": None})
        plt.close(fig)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="YAML run config")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser = argparse.ArgumentParser(prog="cellweight", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("synth", "generate synthetic regions and annotations"),
        ("prepare", "split regions, count classes, write reference/weight patches"),
        ("train", "train the detector and/or classifier"),
        ("detect", "tiled inference and peak extraction on test regions"),
        ("evaluate", "matching, distance sweep, per-class and ROC reports"),
        ("all", "run every stage in order"),
    ]:
        p = sub.add_parser(name, help=help_, parents=[common])
        if name == "train":
            p.add_argument("--model", choices=("detector", "classifier", "both"), default="both")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        if args.command == "synth":
            cmd_synth(cfg)
        elif args.command == "prepare":
            cmd_prepare(cfg)
        elif args.command == "train":
            cmd_train(cfg, args.model)
        elif args.command == "detect":
            cmd_detect(cfg)
        elif args.command == "evaluate":
            cmd_evaluate(cfg)
        else:
            cmd_synth(cfg)
            cmd_prepare(cfg)
            cmd_train(cfg)
            cmd_detect(cfg)
            cmd_evaluate(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, AnnotationError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
