"""Scan- and study-level metrics plus significance machinery.

Per-class precision/recall/F1 come from a 5x5 confusion matrix (rows are
truth) with the 0/0 -> 0 convention; "mean" rows are unweighted macro
means. Study-level results bucket each study by how many of its scans were
misclassified (0 / 1 / >=2) against how many distinct dynamic-phase SOIs it
truly contains. Two systems are compared with a paired swap randomization
test, and families of such p-values are adjusted with the Holm step-down
correction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .phases import NUM_CLASSES, PhaseLabel
from .rng import Rng

SOI_PHASES = (PhaseLabel.NC, PhaseLabel.A, PhaseLabel.V, PhaseLabel.D)


def confusion(pred: list[PhaseLabel], truth: list[PhaseLabel]) -> np.ndarray:
    """5x5 counts; rows index truth, columns index prediction."""
    if len(pred) != len(truth):
        raise ValueError(f"{len(pred)} predictions but {len(truth)} truths")
    if not truth:
        raise ValueError("need at least one scored scan")
    t = np.asarray([int(x) for x in truth])
    p = np.asarray([int(x) for x in pred])
    flat = np.bincount(t * NUM_CLASSES + p, minlength=NUM_CLASSES * NUM_CLASSES)
    return flat.reshape(NUM_CLASSES, NUM_CLASSES)


@dataclass(frozen=True)
class ScanMetrics:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    macro_precision: float
    macro_recall: float
    macro_f1: float

    def to_dict(self) -> dict:
        names = [p.name for p in PhaseLabel]
        return {
            "per-class": {
                name: {
                    "precision": float(self.precision[i]),
                    "recall": float(self.recall[i]),
                    "f1": float(self.f1[i]),
                }
                for i, name in enumerate(names)
            },
            "macro": {
                "precision": self.macro_precision,
                "recall": self.macro_recall,
                "f1": self.macro_f1,
            },
        }


def _prf1_arrays(cm: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    diag = np.diag(cm).astype(np.float64)
    colsum = cm.sum(axis=0).astype(np.float64)
    rowsum = cm.sum(axis=1).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(colsum > 0, diag / colsum, 0.0)
        recall = np.where(rowsum > 0, diag / rowsum, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2.0 * precision * recall / denom, 0.0)
    return precision, recall, f1


def prf1(cm: np.ndarray) -> ScanMetrics:
    cm = np.asarray(cm)
    if cm.shape != (NUM_CLASSES, NUM_CLASSES):
        raise ValueError(f"confusion matrix must be {NUM_CLASSES}x{NUM_CLASSES}, got {cm.shape}")
    if (cm < 0).any():
        raise ValueError("confusion matrix entries must be >= 0")
    precision, recall, f1 = _prf1_arrays(cm)
    return ScanMetrics(
        precision=precision,
        recall=recall,
        f1=f1,
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
    )


def macro_f1(pred, truth) -> float:
    return prf1(confusion(pred, truth)).macro_f1


@dataclass(frozen=True)
class StudyReport:
    # rows: studies with 0..4 true SOIs; columns: 0 errors, 1 error, >=2
    buckets: np.ndarray
    accuracy: float
    per_study: dict[str, dict]

    def to_dict(self) -> dict:
        return {
            "buckets": self.buckets.tolist(),
            "accuracy": self.accuracy,
            "total-studies": int(self.buckets.sum()),
        }


def study_buckets(
    pred: list[PhaseLabel],
    truth: list[PhaseLabel],
    study_ids: list[str],
) -> StudyReport:
    """Bucket studies by SOI count x error count; accuracy = zero-error share.

    A study's SOI count is the number of distinct dynamic phases truly
    present; its error count includes every misclassified scan, catch-all
    scans included.
    """
    if not (len(pred) == len(truth) == len(study_ids)):
        raise ValueError("pred, truth, and study_ids must have equal lengths")
    if not study_ids:
        raise ValueError("need at least one scored scan")
    per_study: dict[str, dict] = {}
    for p, t, sid in zip(pred, truth, study_ids):
        entry = per_study.setdefault(sid, {"phases": set(), "errors": 0, "scans": 0})
        entry["scans"] += 1
        if PhaseLabel(t) in SOI_PHASES:
            entry["phases"].add(PhaseLabel(t))
        if int(p) != int(t):
            entry["errors"] += 1
    buckets = np.zeros((5, 3), dtype=np.int64)
    for entry in per_study.values():
        soi = len(entry["phases"])
        col = min(entry["errors"], 2)
        buckets[soi, col] += 1
        entry["soi_count"] = soi
        entry["phases"] = sorted(ph.name for ph in entry["phases"])
    accuracy = float(buckets[:, 0].sum() / buckets.sum())
    return StudyReport(buckets=buckets, accuracy=accuracy, per_study=per_study)


def accuracy_from_buckets(buckets: np.ndarray) -> float:
    buckets = np.asarray(buckets)
    return float(buckets[:, 0].sum() / buckets.sum())


def _f1_from_joint(counts: np.ndarray, class_index: int | None) -> np.ndarray:
    """F1 rows from stacked confusion matrices [n, 5, 5]."""
    diag = np.einsum("nkk->nk", counts).astype(np.float64)
    colsum = counts.sum(axis=1).astype(np.float64)
    rowsum = counts.sum(axis=2).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(colsum > 0, diag / colsum, 0.0)
        recall = np.where(rowsum > 0, diag / rowsum, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2.0 * precision * recall / denom, 0.0)
    if class_index is None:
        return f1.mean(axis=1)
    return f1[:, class_index]


def _stat_for_swaps(
    a: np.ndarray, b: np.ndarray, truth: np.ndarray, swaps: np.ndarray, class_index: int | None
) -> np.ndarray:
    """|Delta F1| statistic for each swap pattern (rows of `swaps`)."""
    n_iter = swaps.shape[0]
    pa = np.where(swaps, b[None, :], a[None, :])
    pb = np.where(swaps, a[None, :], b[None, :])
    iter_idx = np.repeat(np.arange(n_iter), truth.size)
    base = iter_idx * NUM_CLASSES * NUM_CLASSES + np.tile(truth * NUM_CLASSES, n_iter)
    cm_a = np.bincount(base + pa.ravel(), minlength=n_iter * 25).reshape(n_iter, 5, 5)
    cm_b = np.bincount(base + pb.ravel(), minlength=n_iter * 25).reshape(n_iter, 5, 5)
    return _f1_from_joint(cm_a, class_index) - _f1_from_joint(cm_b, class_index)


def randomization_test(
    outcomes_a: list[PhaseLabel],
    outcomes_b: list[PhaseLabel],
    truth: list[PhaseLabel],
    n_iter: int = 10000,
    seed: int = 0,
    class_index: int | None = None,
) -> float:
    """Paired swap randomization p-value for an F1 difference.

    `class_index` selects one class's F1; None compares macro F1. Each
    iteration swaps the two systems' predictions per scan with probability
    one half and p = (1 + #{|D*| >= |D_obs|}) / (1 + n_iter). When the
    exhaustive space of swap patterns is no larger than n_iter (n <= 20 or
    so) all 2^n patterns are enumerated instead and the p-value is exact,
    #{|D*| >= |D_obs|} / 2^n.
    """
    if not (len(outcomes_a) == len(outcomes_b) == len(truth)):
        raise ValueError("outcome and truth lists must have equal lengths")
    if n_iter < 1000:
        raise ValueError("n_iter must be at least 1000")
    a = np.asarray([int(x) for x in outcomes_a])
    b = np.asarray([int(x) for x in outcomes_b])
    t = np.asarray([int(x) for x in truth])
    n = t.size
    d_obs = abs(
        float(_stat_for_swaps(a, b, t, np.zeros((1, n), dtype=bool), class_index)[0])
    )

    if n <= 62 and 2**n <= n_iter:
        codes = np.arange(2**n, dtype=np.uint64)
        swaps = (codes[:, None] >> np.arange(n, dtype=np.uint64)[None, :]) & np.uint64(1)
        stats = np.abs(_stat_for_swaps(a, b, t, swaps.astype(bool), class_index))
        return float((stats >= d_obs - 1e-12).sum() / 2**n)

    rng = Rng(seed)
    hits = 0
    chunk = 2048
    done = 0
    while done < n_iter:
        m = min(chunk, n_iter - done)
        u = rng.uniform_array((m, n))
        stats = np.abs(_stat_for_swaps(a, b, t, u < 0.5, class_index))
        hits += int((stats >= d_obs - 1e-12).sum())
        done += m
    return (1 + hits) / (1 + n_iter)


@dataclass(frozen=True)
class SignificanceResult:
    raw_p: float
    adjusted_p: float
    reject: bool


def holm_bonferroni(p_values: list[float], alpha: float = 0.05) -> list[SignificanceResult]:
    """Step-down Holm adjustment; results returned in input order.

    adjusted_(i) = max_{j<=i} min(1, p_(j) * (m-j+1)) over the ascending
    order; rejections stop at the first adjusted value above alpha.
    """
    for p in p_values:
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"p-value {p} outside [0,1]")
    m = len(p_values)
    order = sorted(range(m), key=lambda i: (p_values[i], i))
    adjusted = [0.0] * m
    running = 0.0
    for rank, i in enumerate(order):
        running = max(running, min(1.0, p_values[i] * (m - rank)))
        adjusted[i] = running
    rejecting = True
    reject = [False] * m
    for i in order:
        if rejecting and adjusted[i] <= alpha:
            reject[i] = True
        else:
            rejecting = False
    return [SignificanceResult(p_values[i], adjusted[i], reject[i]) for i in range(m)]
