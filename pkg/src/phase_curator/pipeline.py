"""End-to-end orchestration: training, classification, harvesting, reports.

The pipeline consumes JSON-lines manifests (see `mining` for the scan
schema), RVOL volumes, and a single JSON config document with kebab-case
keys. Training sweeps learning rates with validation-based early stopping
and keeps the checkpoint with the best validation macro F1; harvesting
selects, per study and phase, the scan most confidently predicted as that
phase. All stages are deterministic for a fixed seed.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import mining, ops
from .loss import tape_batch_loss
from .metrics import confusion, holm_bonferroni, prf1, randomization_test, study_buckets
from .model import ModelCheckpoint, ModelConfig, build, forward, preprocess, softmax_probabilities
from .optim import adam_state, adam_step
from .phases import PhaseLabel, PhaseTarget
from .rng import Rng, mix_seed
from .tensor import Tape, Tensor, backward
from .volio import open_manifest_writer, read_jsonl, read_rvol

LOSS_MODES = ("ace", "discard-coarse")


class PipelineError(RuntimeError):
    """Unrecoverable data or configuration problem in a pipeline stage."""


def worker_count() -> int:
    """Worker cap from PHASE_CURATOR_THREADS; defaults to a single worker."""
    raw = os.environ.get("PHASE_CURATOR_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise PipelineError(f"PHASE_CURATOR_THREADS must be an integer, got {raw!r}") from None


def _require_keys(raw: dict, known: set[str], where: str) -> None:
    unknown = set(raw) - known
    if unknown:
        raise PipelineError(f"unknown {where} config keys: {sorted(unknown)}")


@dataclass(frozen=True)
class TrainingConfig:
    learning_rates: tuple[float, ...] = (0.003, 0.001)
    batch_size: int = 16
    max_epochs: int = 14
    patience: int = 3
    seed: int = 17
    loss_mode: str = "ace"

    def __post_init__(self):
        if not self.learning_rates:
            raise PipelineError("learning-rate sweep must be non-empty")
        if self.patience < 1:
            raise PipelineError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise PipelineError("batch-size and max-epochs must be >= 1")
        if self.loss_mode not in LOSS_MODES:
            raise PipelineError(f"loss-mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")

    def to_dict(self) -> dict:
        return {
            "learning-rates": list(self.learning_rates),
            "batch-size": self.batch_size,
            "max-epochs": self.max_epochs,
            "patience": self.patience,
            "seed": self.seed,
            "loss-mode": self.loss_mode,
        }

    @staticmethod
    def from_dict(raw: dict) -> "TrainingConfig":
        _require_keys(
            raw,
            {"learning-rates", "batch-size", "max-epochs", "patience", "seed", "loss-mode"},
            "training",
        )
        d = TrainingConfig()
        return TrainingConfig(
            learning_rates=tuple(raw.get("learning-rates", d.learning_rates)),
            batch_size=raw.get("batch-size", d.batch_size),
            max_epochs=raw.get("max-epochs", d.max_epochs),
            patience=raw.get("patience", d.patience),
            seed=raw.get("seed", d.seed),
            loss_mode=raw.get("loss-mode", d.loss_mode),
        )


@dataclass(frozen=True)
class EvaluationConfig:
    alpha: float = 0.05
    n_iter: int = 10000
    seed: int = 99

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "n-iter": self.n_iter, "seed": self.seed}

    @staticmethod
    def from_dict(raw: dict) -> "EvaluationConfig":
        _require_keys(raw, {"alpha", "n-iter", "seed"}, "evaluation")
        d = EvaluationConfig()
        return EvaluationConfig(
            alpha=raw.get("alpha", d.alpha),
            n_iter=raw.get("n-iter", d.n_iter),
            seed=raw.get("seed", d.seed),
        )


@dataclass(frozen=True)
class PipelinePaths:
    train_manifest: str = "train.jsonl"
    val_manifest: str = "val.jsonl"
    test_manifest: str = "test.jsonl"
    volume_root: str = "."
    output_dir: str = "out"
    checkpoint: str = "out/model.ckpt"

    def to_dict(self) -> dict:
        return {
            "train-manifest": self.train_manifest,
            "val-manifest": self.val_manifest,
            "test-manifest": self.test_manifest,
            "volume-root": self.volume_root,
            "output-dir": self.output_dir,
            "checkpoint": self.checkpoint,
        }

    @staticmethod
    def from_dict(raw: dict) -> "PipelinePaths":
        _require_keys(
            raw,
            {
                "train-manifest",
                "val-manifest",
                "test-manifest",
                "volume-root",
                "output-dir",
                "checkpoint",
            },
            "paths",
        )
        d = PipelinePaths()
        return PipelinePaths(
            train_manifest=raw.get("train-manifest", d.train_manifest),
            val_manifest=raw.get("val-manifest", d.val_manifest),
            test_manifest=raw.get("test-manifest", d.test_manifest),
            volume_root=raw.get("volume-root", d.volume_root),
            output_dir=raw.get("output-dir", d.output_dir),
            checkpoint=raw.get("checkpoint", d.checkpoint),
        )


@dataclass(frozen=True)
class PipelineConfig:
    paths: PipelinePaths = field(default_factory=PipelinePaths)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def to_dict(self) -> dict:
        return {
            "paths": self.paths.to_dict(),
            "model": self.model.to_dict(),
            "training": self.training.to_dict(),
            "evaluation": self.evaluation.to_dict(),
        }

    @staticmethod
    def from_dict(raw: dict) -> "PipelineConfig":
        _require_keys(raw, {"paths", "model", "training", "evaluation"}, "top-level")
        return PipelineConfig(
            paths=PipelinePaths.from_dict(raw.get("paths", {})),
            model=ModelConfig.from_dict(raw.get("model", {})),
            training=TrainingConfig.from_dict(raw.get("training", {})),
            evaluation=EvaluationConfig.from_dict(raw.get("evaluation", {})),
        )


def load_config(path: str | Path) -> PipelineConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise PipelineError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise PipelineError(f"config {path} must be a JSON object")
    try:
        return PipelineConfig.from_dict(raw)
    except (ValueError, TypeError) as exc:
        raise PipelineError(f"config {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# data loading


@dataclass
class LoadedScan:
    record: dict
    volume: np.ndarray  # preprocessed [1,D,H,W] float32
    target: PhaseTarget | None
    truth: PhaseLabel | None


def _load_manifest_volumes(
    manifest_path: Path, volume_root: Path, model_config: ModelConfig
) -> list[LoadedScan]:
    rows = read_jsonl(manifest_path, expect_schema=None)
    scans: list[LoadedScan] = []
    for row in rows:
        meta = mining.meta_from_record(row)
        if mining.filter_scan(meta) is not None:
            continue
        vol_path = volume_root / row["volume_path"]
        try:
            volume, _spacing = read_rvol(vol_path)
        except (OSError, ValueError) as exc:
            raise PipelineError(f"cannot read volume {vol_path}: {exc}") from exc
        prepared = preprocess(volume, model_config)
        target = (
            PhaseTarget.decode(row["training_target"]) if "training_target" in row else None
        )
        truth = PhaseLabel[row["true_phase"]] if "true_phase" in row else None
        scans.append(LoadedScan(record=row, volume=prepared, target=target, truth=truth))
    return scans


def _forward_logits(ckpt: ModelCheckpoint, volumes: list[np.ndarray], batch_size: int = 32) -> np.ndarray:
    """Inference logits for a list of [1,D,H,W] arrays, fixed chunking."""
    chunks = [volumes[i : i + batch_size] for i in range(0, len(volumes), batch_size)]

    def run(chunk):
        return forward(ckpt, Tensor(np.stack(chunk))).data

    workers = worker_count()
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(run, chunks))
    else:
        outs = [run(chunk) for chunk in chunks]
    return np.concatenate(outs, axis=0) if outs else np.zeros((0, 5), dtype=np.float32)


# ---------------------------------------------------------------------------
# training


def train(config: PipelineConfig, base_dir: str | Path = ".") -> tuple[ModelCheckpoint, list[dict]]:
    """Learning-rate sweep with validation-based selection.

    Returns the checkpoint with the best validation macro F1 across the
    sweep (ties keep the earlier learning rate) and the epoch log records.
    """
    base = Path(base_dir)
    volume_root = base / config.paths.volume_root
    train_scans = _load_manifest_volumes(base / config.paths.train_manifest, volume_root, config.model)
    val_scans = _load_manifest_volumes(base / config.paths.val_manifest, volume_root, config.model)

    mode = config.training.loss_mode
    usable = []
    for scan in train_scans:
        if scan.target is None:
            raise PipelineError(f"training scan {scan.record['series_uid']} has no training target")
        if mode == "discard-coarse" and scan.target.is_coarse:
            continue
        usable.append(scan)
    if not usable:
        raise PipelineError("training set is empty after filtering")
    for scan in val_scans:
        if scan.truth is None:
            raise PipelineError(f"validation scan {scan.record['series_uid']} has no true phase")

    val_volumes = [s.volume for s in val_scans]
    val_truth = [s.truth for s in val_scans]
    seed = config.training.seed

    log: list[dict] = []
    best: dict | None = None
    for lr_index, lr in enumerate(config.training.learning_rates):
        ckpt = build(config.model, seed)
        params = ckpt.param_list()
        state = adam_state(params)
        lr_best: dict | None = None
        stall = 0
        for epoch in range(1, config.training.max_epochs + 1):
            order = list(range(len(usable)))
            Rng(mix_seed(seed, 7, lr_index, epoch)).shuffle(order)
            epoch_loss = 0.0
            n_batches = 0
            for start in range(0, len(order), config.training.batch_size):
                batch_idx = order[start : start + config.training.batch_size]
                xs = np.stack([usable[i].volume for i in batch_idx])
                targets = [usable[i].target for i in batch_idx]
                for p in params:
                    p.zero_grad()
                with Tape() as tape:
                    logits = forward(ckpt, Tensor(xs))
                    loss_t = tape_batch_loss(logits, targets)
                    backward(tape, loss_t)
                loss_value = loss_t.item()
                if not np.isfinite(loss_value):
                    raise PipelineError(
                        f"non-finite loss at lr={lr}, epoch={epoch}; aborting training"
                    )
                adam_step(params, [p.grad for p in params], state, lr)
                epoch_loss += loss_value
                n_batches += 1
            val_logits = _forward_logits(ckpt, val_volumes)
            val_pred = [PhaseLabel(int(i)) for i in np.argmax(val_logits, axis=1)]
            cm = confusion(val_pred, val_truth)
            val_f1 = prf1(cm).macro_f1
            log.append(
                {
                    "lr": lr,
                    "epoch": epoch,
                    "train-loss": epoch_loss / n_batches,
                    "val-macro-f1": val_f1,
                }
            )
            improved = lr_best is None or val_f1 > lr_best["val_f1"] + 1e-12
            tied = lr_best is not None and val_f1 >= lr_best["val_f1"] - 1e-12
            if improved or tied:
                # ties keep the later epoch: at equal validation scores the
                # longer-trained parameters are preferred
                lr_best = {
                    "val_f1": max(val_f1, lr_best["val_f1"]) if lr_best else val_f1,
                    "epoch": epoch,
                    "params": {k: t.data.copy() for k, t in ckpt.params.items()},
                }
            if improved:
                stall = 0
            else:
                stall += 1
                if stall >= config.training.patience:
                    break
        if best is None or lr_best["val_f1"] > best["val_f1"] + 1e-12:
            best = dict(lr_best, lr=lr)

    final = build(config.model, seed)
    for name, data in best["params"].items():
        final.params[name].data[...] = data
    final.metadata = {
        "seed": seed,
        "lr": best["lr"],
        "epoch": best["epoch"],
        "val-macro-f1": best["val_f1"],
        "loss-mode": mode,
    }
    return final, log


# ---------------------------------------------------------------------------
# classification


def classify(
    ckpt: ModelCheckpoint,
    manifest_path: str | Path,
    volume_root: str | Path,
    rules: list[mining.Rule] | None = None,
) -> list[dict]:
    """Per-scan predictions for every kept scan in a manifest.

    Missing or unreadable volumes yield error records instead of aborting
    the batch. Each record carries the mined label for later comparison.
    """
    rules = mining.default_rules() if rules is None else rules
    rows = read_jsonl(Path(manifest_path), expect_schema=None)
    volume_root = Path(volume_root)

    kept: list[tuple[dict, mining.ScanMeta]] = []
    results: list[dict] = []
    for row in rows:
        meta = mining.meta_from_record(row)
        if mining.filter_scan(meta) is not None:
            continue
        kept.append((row, meta))

    volumes = []
    loadable: list[tuple[dict, mining.ScanMeta]] = []
    for row, meta in kept:
        vol_path = volume_root / row["volume_path"]
        try:
            volume, _ = read_rvol(vol_path)
        except (OSError, ValueError) as exc:
            results.append(
                {
                    "study_uid": meta.study_uid,
                    "series_uid": meta.series_uid,
                    "error": f"cannot read volume: {exc}",
                }
            )
            continue
        volumes.append(preprocess(volume, ckpt.config))
        loadable.append((row, meta))

    if volumes:
        logits = _forward_logits(ckpt, volumes)
        probs = softmax_probabilities(logits)
        preds = np.argmax(probs, axis=1)
        for (row, meta), p_row, pred in zip(loadable, probs, preds):
            mined = mining.mine_label(meta, rules)
            record = {
                "study_uid": meta.study_uid,
                "series_uid": meta.series_uid,
                "predicted": PhaseLabel(int(pred)).name,
                "probabilities": [float(x) for x in p_row],
                "mined_class": mined.label,
                "mined_pattern": mined.matched_pattern,
            }
            if "true_phase" in row:
                record["true_phase"] = row["true_phase"]
            results.append(record)
    return results


# ---------------------------------------------------------------------------
# harvesting


@dataclass(frozen=True)
class CuratedStudy:
    study_uid: str
    selections: dict  # phase name -> {"series_uid", "probability"}
    completeness: dict  # phase name -> bool

    def to_dict(self) -> dict:
        return {
            "study_uid": self.study_uid,
            "selections": self.selections,
            "completeness": self.completeness,
        }


HARVEST_PHASES = (PhaseLabel.NC, PhaseLabel.A, PhaseLabel.V, PhaseLabel.D)


def curate(predictions: list[dict]) -> list[CuratedStudy]:
    """Pick at most one scan per dynamic phase per study.

    Only scans predicted as a phase compete for that phase (never as a
    fallback from another phase, and never scans predicted as the
    catch-all); the most probable wins.
    """
    studies: dict[str, list[dict]] = {}
    for rec in predictions:
        if "error" in rec:
            continue
        studies.setdefault(rec["study_uid"], []).append(rec)
    out = []
    for study_uid in sorted(studies):
        selections = {}
        completeness = {}
        for phase in HARVEST_PHASES:
            candidates = [r for r in studies[study_uid] if r["predicted"] == phase.name]
            if candidates:
                chosen = max(candidates, key=lambda r: r["probabilities"][int(phase)])
                selections[phase.name] = {
                    "series_uid": chosen["series_uid"],
                    "probability": chosen["probabilities"][int(phase)],
                }
                completeness[phase.name] = True
            else:
                completeness[phase.name] = False
        out.append(CuratedStudy(study_uid=study_uid, selections=selections, completeness=completeness))
    return out


# ---------------------------------------------------------------------------
# evaluation


def _scored(predictions: list[dict]) -> tuple[list[PhaseLabel], list[PhaseLabel], list[str]]:
    pred, truth, sids = [], [], []
    for rec in predictions:
        if "error" in rec or "true_phase" not in rec:
            continue
        pred.append(PhaseLabel[rec["predicted"]])
        truth.append(PhaseLabel[rec["true_phase"]])
        sids.append(rec["study_uid"])
    if not pred:
        raise PipelineError("no scored predictions (records need true_phase)")
    return pred, truth, sids


def mined_class_as_prediction(mined_class: str) -> PhaseLabel:
    """Text-mining baseline as a 5-way prediction.

    Coarse "Contrast" cannot name an exact phase, so it scores as the
    catch-all class (always an error against a dynamic-phase truth).
    """
    if mined_class in ("Other", "Contrast"):
        return PhaseLabel.O
    return PhaseLabel[mined_class]


def evaluate(
    predictions: list[dict],
    baseline: list[dict] | None = None,
    alpha: float = 0.05,
    n_iter: int = 10000,
    seed: int = 99,
) -> dict:
    """Scan metrics, study buckets, and optional paired significance block.

    With a baseline, per-class F1 differences get raw randomization
    p-values adjusted as one Holm family; the macro-F1 comparison is
    reported with its raw p-value alongside.
    """
    pred, truth, sids = _scored(predictions)
    cm = confusion(pred, truth)
    scan = prf1(cm)
    study = study_buckets(pred, truth, sids)
    report = {
        "scan-metrics": scan.to_dict(),
        "confusion-matrix": cm.tolist(),
        "study-report": study.to_dict(),
        "scored-scans": len(pred),
    }
    if baseline is not None:
        run_b = {rec["series_uid"]: rec for rec in baseline if "error" not in rec}
        pairs = [
            (rec, run_b[rec["series_uid"]])
            for rec in predictions
            if "error" not in rec and "true_phase" in rec and rec["series_uid"] in run_b
        ]
        if not pairs:
            raise PipelineError("baseline shares no scans with the predictions")
        pa = [PhaseLabel[a["predicted"]] for a, _ in pairs]
        pb = [PhaseLabel[b["predicted"]] for _, b in pairs]
        tr = [PhaseLabel[a["true_phase"]] for a, _ in pairs]
        raw = [
            randomization_test(pa, pb, tr, n_iter=n_iter, seed=mix_seed(seed, k), class_index=k)
            for k in range(5)
        ]
        adjusted = holm_bonferroni(raw, alpha)
        mean_p = randomization_test(pa, pb, tr, n_iter=n_iter, seed=mix_seed(seed, 5), class_index=None)
        report["significance"] = {
            "alpha": alpha,
            "n-iter": n_iter,
            "per-class": [
                {
                    "class": PhaseLabel(k).name,
                    "raw-p": res.raw_p,
                    "adjusted-p": res.adjusted_p,
                    "reject": res.reject,
                }
                for k, res in enumerate(adjusted)
            ],
            "macro-f1-raw-p": mean_p,
            "paired-scans": len(pairs),
        }
    return report


def format_report(report: dict) -> str:
    """Human-readable rendering of an evaluation report."""
    lines = []
    per_class = report["scan-metrics"]["per-class"]
    lines.append(f"{'class':>8} {'precision':>10} {'recall':>10} {'f1':>10}")
    for name, row in per_class.items():
        lines.append(
            f"{name:>8} {row['precision']:>10.4f} {row['recall']:>10.4f} {row['f1']:>10.4f}"
        )
    macro = report["scan-metrics"]["macro"]
    lines.append(
        f"{'mean':>8} {macro['precision']:>10.4f} {macro['recall']:>10.4f} {macro['f1']:>10.4f}"
    )
    study = report["study-report"]
    lines.append("")
    lines.append(f"{'SOIs':>6} {'0 errs':>8} {'1 err':>8} {'>=2':>8}")
    for soi, row in enumerate(study["buckets"]):
        lines.append(f"{soi:>6} {row[0]:>8} {row[1]:>8} {row[2]:>8}")
    lines.append(f"study accuracy: {study['accuracy']:.4f} over {study['total-studies']} studies")
    if "significance" in report:
        sig = report["significance"]
        lines.append("")
        lines.append(f"paired significance (alpha={sig['alpha']}, n-iter={sig['n-iter']})")
        for row in sig["per-class"]:
            flag = "*" if row["reject"] else " "
            lines.append(
                f"  {row['class']:>3}: raw p={row['raw-p']:.4f} adjusted={row['adjusted-p']:.4f} {flag}"
            )
        lines.append(f"  macro F1 raw p={sig['macro-f1-raw-p']:.4f}")
    return "\n".join(lines)


def write_predictions(path: str | Path, predictions: list[dict]) -> None:
    with open_manifest_writer(path, "predictions") as writer:
        for rec in predictions:
            writer.write(rec)


def write_curated(path: str | Path, curated: list[CuratedStudy]) -> None:
    with open_manifest_writer(path, "curated") as writer:
        for study in curated:
            writer.write(study.to_dict())


def write_log(path: str | Path, records: list[dict]) -> None:
    with open_manifest_writer(path, "training-log") as writer:
        for rec in records:
            writer.write(rec)
