"""Command-line surface.

Subcommands wire the library stages together:

    phantom   generate a synthetic dataset (volumes + manifests + config)
    mine      label a manifest with the rule miner
    train     learning-rate sweep, early stopping, best checkpoint
    classify  per-scan phase predictions for a manifest
    curate    harvest one scan per phase per study from predictions
    eval      metrics report, optionally with paired significance
    cam       export a saliency volume for one scan and class

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import checkpoint as ckpt_io
from . import mining, pipeline
from .model import saliency
from .phantom import PhantomConfig, generate_dataset
from .phases import PhaseLabel
from .volio import open_manifest_writer, read_jsonl, read_rvol, write_rvol

USAGE_EXIT = 1
DATA_EXIT = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(USAGE_EXIT)


def _build_parser() -> _Parser:
    parser = _Parser(prog="phase-curator", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("phantom", help="generate a synthetic phantom dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=PhantomConfig().seed)
    p.add_argument("--train", type=int, default=500, help="total training scans")
    p.add_argument("--val", type=int, default=100, help="total validation scans")
    p.add_argument("--test", type=int, default=200, help="total test scans")
    p.add_argument("--noise-sigma", type=float, default=PhantomConfig().noise_sigma)
    p.add_argument("--coarse-fraction", type=float, default=PhantomConfig().coarse_label_fraction)
    p.add_argument("--corruption-rate", type=float, default=PhantomConfig().corruption_rate)

    p = sub.add_parser("mine", help="apply the text-mining rules to a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="labeled manifest path")
    p.add_argument("--rules", help="optional rule file overriding the built-in table")
    p.add_argument("--rejects", help="where to write dropped scans (default <out>.rejects)")

    p = sub.add_parser("train", help="train and select a checkpoint")
    p.add_argument("--config", required=True, help="pipeline config JSON")
    p.add_argument("--seed", type=int, help="override the training seed")

    p = sub.add_parser("classify", help="predict phases for a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--volume-root", default=".")
    p.add_argument("--out", required=True, help="predictions JSONL path")

    p = sub.add_parser("curate", help="harvest per-study phase scans from predictions")
    p.add_argument("--predictions", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="metrics report from predictions")
    p.add_argument("--predictions", required=True)
    p.add_argument("--baseline", help="second predictions file for paired significance")
    p.add_argument("--out", help="JSON report path (default stdout only)")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--n-iter", type=int, default=10000)
    p.add_argument("--seed", type=int, default=99)

    p = sub.add_parser("cam", help="export a saliency volume")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volume", required=True, help="input RVOL volume")
    p.add_argument("--phase", required=True, choices=[x.name for x in PhaseLabel])
    p.add_argument("--out", required=True, help="output RVOL heatmap")

    return parser


def _cmd_phantom(args) -> int:
    config = PhantomConfig(
        seed=args.seed,
        noise_sigma=args.noise_sigma,
        coarse_label_fraction=args.coarse_fraction,
        corruption_rate=args.corruption_rate,
    )
    out = Path(args.out)
    phases = list(PhaseLabel)
    counts = {}
    grand_total = args.train + args.val + args.test
    if grand_total <= 0:
        raise pipeline.PipelineError("dataset would be empty; raise the split sizes")
    base, extra = divmod(grand_total, len(phases))
    for i, phase in enumerate(phases):
        counts[phase] = base + (1 if i < extra else 0)
    fractions = (
        args.train / grand_total,
        args.val / grand_total,
        args.test / grand_total,
    )
    summary = generate_dataset(config, counts, fractions, out)

    cfg = pipeline.PipelineConfig(
        paths=pipeline.PipelinePaths(
            train_manifest=str(out / "train.jsonl"),
            val_manifest=str(out / "val.jsonl"),
            test_manifest=str(out / "test.jsonl"),
            volume_root=str(out),
            output_dir=str(out / "run"),
            checkpoint=str(out / "run" / "model.ckpt"),
        )
    )
    (out / "pipeline.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    print(json.dumps({"out": str(out), **summary}, sort_keys=True))
    return 0


def _cmd_mine(args) -> int:
    rules = mining.load_rules(args.rules) if args.rules else None
    lines = Path(args.manifest).read_text(encoding="utf-8").splitlines()
    result = mining.mine_manifest(lines, rules)
    with open_manifest_writer(args.out, "mined-manifest") as writer:
        for rec in result.kept:
            writer.write(rec)
    rejects_path = args.rejects or f"{args.out}.rejects"
    with open_manifest_writer(rejects_path, "mine-rejects") as writer:
        for rec in result.rejected:
            writer.write(rec)
        for rec in result.errors:
            writer.write(rec)
    print(json.dumps({"counts": result.counts, "kept": len(result.kept), "rejected": len(result.rejected), "errors": len(result.errors)}, sort_keys=True))
    return 0


def _cmd_train(args) -> int:
    config = pipeline.load_config(args.config)
    if args.seed is not None:
        training = pipeline.TrainingConfig.from_dict({**config.training.to_dict(), "seed": args.seed})
        config = pipeline.PipelineConfig(
            paths=config.paths, model=config.model, training=training, evaluation=config.evaluation
        )
    ckpt, log = pipeline.train(config)
    out_dir = Path(config.paths.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_io.save(ckpt, config.paths.checkpoint)
    pipeline.write_log(out_dir / "training-log.jsonl", log)
    print(json.dumps({"checkpoint": config.paths.checkpoint, **{k: v for k, v in ckpt.metadata.items()}}, sort_keys=True))
    return 0


def _cmd_classify(args) -> int:
    ckpt = ckpt_io.load(args.checkpoint)
    predictions = pipeline.classify(ckpt, args.manifest, args.volume_root)
    pipeline.write_predictions(args.out, predictions)
    n_err = sum(1 for r in predictions if "error" in r)
    print(json.dumps({"out": args.out, "scans": len(predictions) - n_err, "errors": n_err}, sort_keys=True))
    return 0


def _cmd_curate(args) -> int:
    predictions = read_jsonl(args.predictions, expect_schema="predictions")
    curated = pipeline.curate(predictions)
    pipeline.write_curated(args.out, curated)
    complete = sum(1 for c in curated if all(c.completeness.values()))
    print(json.dumps({"out": args.out, "studies": len(curated), "complete": complete}, sort_keys=True))
    return 0


def _cmd_eval(args) -> int:
    predictions = read_jsonl(args.predictions, expect_schema="predictions")
    baseline = read_jsonl(args.baseline, expect_schema="predictions") if args.baseline else None
    report = pipeline.evaluate(
        predictions, baseline, alpha=args.alpha, n_iter=args.n_iter, seed=args.seed
    )
    print(pipeline.format_report(report))
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return 0


def _cmd_cam(args) -> int:
    ckpt = ckpt_io.load(args.checkpoint)
    volume, spacing = read_rvol(args.volume)
    heat = saliency(ckpt, volume, int(PhaseLabel[args.phase]))
    write_rvol(args.out, heat, spacing)
    print(json.dumps({"out": args.out, "max": float(heat.max())}, sort_keys=True))
    return 0


_COMMANDS = {
    "phantom": _cmd_phantom,
    "mine": _cmd_mine,
    "train": _cmd_train,
    "classify": _cmd_classify,
    "curate": _cmd_curate,
    "eval": _cmd_eval,
    "cam": _cmd_cam,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return USAGE_EXIT
    try:
        return _COMMANDS[args.command](args)
    except (pipeline.PipelineError, ValueError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return DATA_EXIT


if __name__ == "__main__":
    raise SystemExit(main())
