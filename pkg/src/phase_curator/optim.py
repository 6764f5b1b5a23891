"""Parameter update rules.

Functional optimizers over parallel (params, grads) lists; any state lives
in caller-owned dicts so training loops stay explicit and reproducible.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor


def _check_pairs(params: list[Tensor], grads: list[np.ndarray]) -> None:
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} grads")
    for p, g in zip(params, grads):
        if g.shape != p.data.shape:
            raise ShapeError(f"grad shape {g.shape} does not match param shape {p.data.shape}")


def sgd_state(params: list[Tensor]) -> dict:
    return {"velocity": [np.zeros_like(p.data) for p in params]}


def sgd_step(params: list[Tensor], grads: list[np.ndarray], lr: float, momentum: float = 0.0, state: dict | None = None) -> None:
    """v = momentum*v + g; p -= lr*v. With momentum=0 no state is needed."""
    _check_pairs(params, grads)
    if momentum != 0.0 and state is None:
        raise ValueError("sgd with momentum needs a state dict from sgd_state()")
    for i, (p, g) in enumerate(zip(params, grads)):
        if momentum == 0.0:
            p.data -= (lr * g).astype(p.data.dtype, copy=False)
        else:
            v = state["velocity"][i]
            v *= momentum
            v += g
            p.data -= (lr * v).astype(p.data.dtype, copy=False)


def adam_state(params: list[Tensor]) -> dict:
    return {
        "step": 0,
        "m": [np.zeros_like(p.data) for p in params],
        "v": [np.zeros_like(p.data) for p in params],
    }


def adam_step(
    params: list[Tensor],
    grads: list[np.ndarray],
    state: dict,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update."""
    _check_pairs(params, grads)
    state["step"] += 1
    t = state["step"]
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        m = state["m"][i]
        v = state["v"][i]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data -= update.astype(p.data.dtype, copy=False)
