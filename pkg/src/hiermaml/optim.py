"""Plain gradient descent and Adam on flat parameter vectors.

Both steps are pure functions: they return fresh arrays and (for Adam) a new
state, so callers can snapshot or replay updates freely.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class OptimizerState:
    """Tagged optimizer state; moments are only present for Adam."""

    kind: str  # "sgd" | "adam"
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def sgd(cls):
        return cls(kind="sgd")

    @classmethod
    def adam(cls, n_params, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(
            kind="adam",
            m=np.zeros(n_params),
            v=np.zeros(n_params),
            t=0,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def _check_lengths(params, grad):
    if params.shape != grad.shape:
        raise ValueError(
            f"parameter/gradient length mismatch: {params.shape} vs {grad.shape}"
        )


def sgd_step(params, grad, lr):
    """params - lr * grad, elementwise."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    _check_lengths(params, grad)
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    return params - lr * grad


def adam_step(state: OptimizerState, params, grad, lr):
    """One bias-corrected Adam update; returns (new_params, new_state)."""
    if state.kind != "adam":
        raise ValueError(f"adam_step needs an adam state, got kind {state.kind!r}")
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    _check_lengths(params, grad)
    if state.m.shape != params.shape:
        raise ValueError(
            f"state length {state.m.shape} does not match parameters {params.shape}"
        )
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, replace(state, m=m, v=v, t=t)


def optimizer_step(state: OptimizerState, params, grad, lr):
    """Dispatch on the state's kind tag."""
    if state.kind == "sgd":
        return sgd_step(params, grad, lr), state
    return adam_step(state, params, grad, lr)
