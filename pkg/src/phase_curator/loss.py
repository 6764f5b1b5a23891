"""Aggregated cross entropy over exact and coarse phase targets.

For an exact phase k the loss is the usual softmax cross entropy,
logsumexp(w) - w_k. For a coarse "contrast" target the probability of the
event is the summed softmax mass of {A, V, D}, and the loss collapses to a
difference of two logsumexp terms:

    loss = logsumexp(w_all) - logsumexp(w_A, w_V, w_D)

which stays finite for logit magnitudes far beyond anything a trained
network produces. Closed-form gradients are returned alongside each loss;
`tape_batch_loss` builds the same quantity out of tape ops so training can
backpropagate through it.

All math here runs in float64.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .phases import CONTRAST_INDICES, NUM_CLASSES, PhaseTarget
from .tensor import Tensor


def _lse(w: np.ndarray) -> float:
    m = w.max()
    return float(m + np.log(np.exp(w - m).sum()))


def _softmax(w: np.ndarray) -> np.ndarray:
    m = w.max()
    e = np.exp(w - m)
    return e / e.sum()


def contrast_probability(logits) -> float:
    """Summed softmax mass of the contrast phases {A, V, D}, max-shifted."""
    w = np.asarray(logits, dtype=np.float64).reshape(-1)
    if w.shape != (NUM_CLASSES,):
        raise ValueError(f"expected {NUM_CLASSES} logits, got shape {w.shape}")
    p = _softmax(w)
    return float(p[list(CONTRAST_INDICES)].sum())


def ace_loss(logits, target: PhaseTarget) -> tuple[float, np.ndarray]:
    """Loss and its gradient with respect to the five logits.

    Exact target k:  grad_i = p_i - 1{i=k}
    Coarse target:   grad_i = p_i - 1{i in C} * softmax_C(w)_i
    """
    w = np.asarray(logits, dtype=np.float64).reshape(-1)
    if w.shape != (NUM_CLASSES,):
        raise ValueError(f"expected {NUM_CLASSES} logits, got shape {w.shape}")
    p = _softmax(w)
    grad = p.copy()
    if target.is_coarse:
        idx = list(CONTRAST_INDICES)
        loss = _lse(w) - _lse(w[idx])
        grad[idx] -= _softmax(w[idx])
    else:
        k = int(target.label)
        loss = _lse(w) - w[k]
        grad[k] -= 1.0
    return loss, grad


def batch_loss(logits, targets: list[PhaseTarget]) -> tuple[float, np.ndarray]:
    """Mean per-sample loss; gradient rows scaled by 1/N to match."""
    arr = np.asarray(logits, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != NUM_CLASSES:
        raise ValueError(f"expected [N,{NUM_CLASSES}] logits, got shape {arr.shape}")
    if arr.shape[0] != len(targets):
        raise ValueError(f"{arr.shape[0]} logit rows but {len(targets)} targets")
    if len(targets) == 0:
        raise ValueError("batch must contain at least one sample")
    total = 0.0
    grads = np.empty_like(arr)
    for i, target in enumerate(targets):
        loss_i, grad_i = ace_loss(arr[i], target)
        total += loss_i
        grads[i] = grad_i
    n = len(targets)
    return total / n, grads / n


def tape_batch_loss(logits: Tensor, targets: list[PhaseTarget]) -> Tensor:
    """Mean ACE loss as a scalar tensor on the active tape.

    Groups samples by target subset (one group per exact class, one for
    coarse contrast) so each group is a pair of logsumexp ops; group order
    is fixed for determinism.
    """
    n = logits.shape[0]
    if n != len(targets):
        raise ValueError(f"{n} logit rows but {len(targets)} targets")
    if n == 0:
        raise ValueError("batch must contain at least one sample")
    groups: dict[tuple[int, ...], list[int]] = {}
    for i, target in enumerate(targets):
        subset = CONTRAST_INDICES if target.is_coarse else (int(target.label),)
        groups.setdefault(subset, []).append(i)

    full = tuple(range(NUM_CLASSES))
    total: Tensor | None = None
    for subset in sorted(groups):
        rows = ops.gather_rows(logits, groups[subset])
        part = ops.sum_all(ops.sub(ops.logsumexp(rows, full), ops.logsumexp(rows, subset)))
        total = part if total is None else ops.add(total, part)
    return ops.scale(total, 1.0 / n)
