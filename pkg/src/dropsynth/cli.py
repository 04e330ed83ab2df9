"""Command-line entry point.

Subcommands cover the full pipeline: prepare, train-gan, generate, fid,
eval-detect, pseudo-label, experiment, and plot. Every run takes a --seed
and writes a resolved-config snapshot next to its outputs so results can
be replayed. Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

log = logging.getLogger(__name__)


def _data_root() -> Path:
    """Root that relative data paths resolve against (DROPSYNTH_DATA_ROOT)."""
    return Path(os.environ.get("DROPSYNTH_DATA_ROOT", "."))


def _snapshot(args: argparse.Namespace, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = {k: str(v) for k, v in vars(args).items() if k != "func"}
    (out_dir / "run_config.json").write_text(json.dumps(resolved, indent=2) + "\n")


def cmd_prepare(args) -> int:
    from .data import prepare_dataset

    out_dir = Path(args.out)
    _snapshot(args, out_dir)
    source = Path(args.source)
    if not source.is_absolute():
        source = _data_root() / source
    manifest = prepare_dataset(
        source, out_dir, args.resolution,
        split_ratios=tuple(args.ratios), seed=args.seed, channels=args.channels,
    )
    print(f"prepared {manifest.split_sizes} -> {out_dir / 'manifest.json'}")
    return 0


def cmd_train_gan(args) -> int:
    from .data import DatasetManifest
    from .networks import GanConfig
    from .train import TrainSchedule, train

    config = json.loads(Path(args.config).read_text())
    schedule = TrainSchedule.from_dict(config.get("schedule", {}))
    gan_cfg = GanConfig.from_dict(config["gan"]) if "gan" in config else GanConfig()
    out_dir = Path(args.out)
    _snapshot(args, out_dir)
    manifest = DatasetManifest.load(args.manifest)
    paths = train(
        manifest, schedule, gan_cfg, args.seed, out_dir,
        log_path=out_dir / "train_log.ndjson",
        resume_from=args.resume,
    )
    print(f"emitted {len(paths)} checkpoints, final {paths[-1]}")
    return 0


def cmd_generate(args) -> int:
    from .train import generate

    out_dir = Path(args.out)
    _snapshot(args, out_dir)
    paths = generate(args.checkpoint, args.count, args.seed, out_dir)
    print(f"wrote {len(paths)} images to {out_dir}")
    return 0


def _load_or_extract(path: str, extractor: str):
    from .data import load_image
    from .fid import FeatureSet, extract_features

    p = Path(path)
    if p.is_file() and p.suffix == ".npz":
        return FeatureSet.load(p)
    images = [load_image(f) for f in sorted(p.glob("*.png"))]
    if not images:
        raise FileNotFoundError(f"no feature cache or PNGs at {path}")
    return extract_features(images, extractor)


def cmd_fid(args) -> int:
    from .fid import fid_from_features

    real = _load_or_extract(args.real, args.extractor)
    fake = _load_or_extract(args.fake, args.extractor)
    report = fid_from_features(real, fake, variant=args.variant)
    if args.out:
        report.save(args.out)
    print(f"FID ({report.formula_variant}, {report.extractor_id}, "
          f"N={report.n_real}/{report.n_fake}): {report.fid:.4f}")
    return 0


def cmd_eval_detect(args) -> int:
    from .data import read_labels
    from .detect import map_suite, read_predictions

    preds_by_image = {}
    for r in read_predictions(args.predictions):
        preds_by_image.setdefault(r.image_id, []).append(r)
    gts = {}
    for label_file in sorted(Path(args.labels).glob("*.txt")):
        gts[label_file.stem] = read_labels(label_file)
    report = map_suite(preds_by_image, gts, interpolation=args.interpolation)
    if args.out:
        report.save(args.out)
    print(f"mAP50 {report.map50:.4f}  mAP50-95 {report.map50_95:.4f}  "
          f"P {report.precision:.4f}  R {report.recall:.4f}")
    return 0


def cmd_pseudo_label(args) -> int:
    from .data import DatasetManifest
    from .harness import BlobDetector, pseudo_label

    out_dir = Path(args.out)
    _snapshot(args, out_dir)
    manifest = DatasetManifest.load(args.manifest)
    labeled, stats = pseudo_label(
        BlobDetector(), args.model, manifest, args.floor, out_dir
    )
    labeled.save(out_dir / "labeled_manifest.json")
    print(f"labeled {len(stats['box_counts'])} images, "
          f"{len(stats['empty_label_images'])} empty")
    return 0


def cmd_experiment(args) -> int:
    from .data import DatasetManifest
    from .harness import BlobDetector, run_ladder

    out_dir = Path(args.out)
    _snapshot(args, out_dir)
    real = DatasetManifest.load(args.real_manifest)
    synth = DatasetManifest.load(args.synthetic_manifest)
    rungs = [int(r) for r in args.rungs.split(",")]
    report = run_ladder(BlobDetector(), real, synth, rungs, args.seed, out_dir)
    print(report.render_table())
    return 1 if report.failures else 0


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if args.kind == "pr":
        from .detect import DetectionReport

        report = DetectionReport.load(args.report)
        rec = [p[0] for p in report.pr_curve]
        prec = [p[1] for p in report.pr_curve]
        fig, ax = plt.subplots()
        ax.plot(rec, prec)
        ax.set_xlabel("Recall")
        ax.set_ylabel("Precision")
        ax.set_title(f"PR curve (mAP50 {report.map50:.3f})")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.05)
    elif args.kind == "fid":
        doc = json.loads(Path(args.report).read_text())
        fig, ax = plt.subplots()
        ax.bar([doc["extractor_id"]], [doc["fid"]])
        ax.set_ylabel("FID")
    else:  # ladder
        doc = json.loads(Path(args.report).read_text())
        fig, ax = plt.subplots()
        rungs = doc["rungs"]
        for split in ("val", "test"):
            for metric in ("map50", "map50_95"):
                ax.plot(rungs, [r[metric] for r in doc[split]],
                        marker="o", label=f"{split} {metric}")
        ax.set_xlabel("Training set size")
        ax.set_ylabel("Metric")
        ax.legend()
    fig.savefig(args.out, dpi=120)
    plt.close(fig)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dropsynth",
        description="Droplet image synthesis and detection augmentation pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.add_argument("--seed", type=int, default=0)
        p.set_defaults(func=fn)
        return p

    p = add("prepare", cmd_prepare, help="normalize and split a raw image directory")
    p.add_argument("--source", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resolution", type=int, required=True)
    p.add_argument("--ratios", type=float, nargs=3, default=[0.653, 0.174, 0.173])
    p.add_argument("--channels", type=int, default=1, choices=[1, 3])

    p = add("train-gan", cmd_train_gan, help="run progressive adversarial training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", required=True, help="JSON with gan/schedule sections")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None)

    p = add("generate", cmd_generate, help="sample images from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)

    p = add("fid", cmd_fid, help="Frechet distance between two image sets")
    p.add_argument("--real", required=True, help="feature .npz or PNG directory")
    p.add_argument("--fake", required=True)
    p.add_argument("--extractor", default="tiny_embedder",
                   choices=["tiny_embedder", "inception_v3"])
    p.add_argument("--variant", default="standard",
                   choices=["standard", "paper_literal"])
    p.add_argument("--out", default=None)

    p = add("eval-detect", cmd_eval_detect, help="score predictions against labels")
    p.add_argument("--predictions", required=True)
    p.add_argument("--labels", required=True, help="directory of label files")
    p.add_argument("--interpolation", default="all_point",
                   choices=["all_point", "coco_101"])
    p.add_argument("--out", default=None)

    p = add("pseudo-label", cmd_pseudo_label, help="label synthetic images")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--floor", type=float, default=0.25)
    p.add_argument("--out", required=True)

    p = add("experiment", cmd_experiment, help="run the dataset mixing ladder")
    p.add_argument("--real-manifest", required=True)
    p.add_argument("--synthetic-manifest", required=True)
    p.add_argument("--rungs", required=True, help="comma-separated train sizes")
    p.add_argument("--out", required=True)

    p = add("plot", cmd_plot, help="render report plots to image files")
    p.add_argument("kind", choices=["pr", "fid", "ladder"])
    p.add_argument("--report", required=True)
    p.add_argument("--out", required=True)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
