"""Adam optimizer over lists of parameter tensors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    """Moment estimates and step counter; one (m, v) pair per parameter."""

    step: int
    m: list[np.ndarray]
    v: list[np.ndarray]
    hyper: dict = field(default_factory=dict)


def adam_init(params: list[Tensor], lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(
        step=0,
        m=[np.zeros_like(p.data) for p in params],
        v=[np.zeros_like(p.data) for p in params],
        hyper={"lr": lr, "beta1": beta1, "beta2": beta2, "eps": eps},
    )


def adam_step(params: list[Tensor], grads: list[np.ndarray],
              state: AdamState) -> AdamState:
    """One bias-corrected Adam update; parameter data is updated in place."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ValueError(
            f"adam_step length mismatch: {len(params)} params, "
            f"{len(grads)} grads, {len(state.m)} moment slots")
    lr = state.hyper["lr"]
    b1 = state.hyper["beta1"]
    b2 = state.hyper["beta2"]
    eps = state.hyper["eps"]
    state.step += 1
    t = state.step
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        g = np.asarray(g)
        if g.shape != p.data.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter "
                f"shape {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / bias1
        v_hat = v / bias2
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


def zero_grads(params: list[Tensor]):
    for p in params:
        p.grad = None
