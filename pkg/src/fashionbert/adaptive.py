"""Per-batch loss weights on the probability simplex.

The weights minimise a trade-off between the weighted task signals and the
spread of the weights. Its KKT solution is closed form::

    w_i = (L - g_i**2)**-1 / sum_j (L - g_j**2)**-1

which is non-negative whenever every signal ``g_i`` lies in [0, 1).
:func:`qp_oracle` reaches the same point by projected gradient descent on
an independent diagonal quadratic, and is used to cross-check the solver.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import Tensor


class ConvergenceError(RuntimeError):
    """Projected gradient descent did not settle; ``trace`` holds the last iterates."""

    def __init__(self, message: str, trace: list[np.ndarray]):
        super().__init__(message)
        self.trace = trace


def _validate(signals) -> np.ndarray:
    g = np.asarray(signals, dtype=np.float64)
    if g.ndim not in (1, 2) or g.shape[-1] < 2:
        raise ValueError(f"need at least two task signals, got shape {g.shape}")
    if not np.all(np.isfinite(g)) or np.any(g < 0.0) or np.any(g >= 1.0):
        raise ValueError("every task signal must lie in [0, 1)")
    return g


def solve_weights(signals) -> np.ndarray:
    """Closed-form loss weights. Accepts one signal vector or a stack of them."""
    g = _validate(signals)
    n_tasks = g.shape[-1]
    inv = 1.0 / (n_tasks - g * g)
    return inv / inv.sum(axis=-1, keepdims=True)


def stationarity_residual(signals, weights) -> float:
    """Largest deviation of the Lagrange stationarity system from a common
    multiplier: ``-g_i^2 w_i + L w_i - sum_j w_j - alpha = 0`` for all i."""
    g = _validate(signals)
    w = np.asarray(weights, dtype=np.float64)
    n_tasks = g.shape[-1]
    alpha = -g * g * w + n_tasks * w - w.sum(axis=-1, keepdims=True)
    return float(np.max(np.abs(alpha - alpha.mean(axis=-1, keepdims=True))))


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row of ``v`` onto the probability simplex
    (sort-and-threshold method)."""
    v = np.atleast_2d(v)
    n = v.shape[1]
    u = -np.sort(-v, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    ks = np.arange(1, n + 1)
    cond = u - css / ks > 0
    rho = n - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(v.shape[0]), rho] / (rho + 1)
    return np.maximum(v - theta[:, None], 0.0)


def qp_oracle(
    signals,
    step: float = 1e-2,
    max_iter: int = 50_000,
    tol: float = 1e-12,
    trace_len: int = 5,
) -> np.ndarray:
    """Minimise ``sum_i (L - g_i^2) w_i^2`` over the simplex by projected
    gradient descent from the uniform point. Rows of a 2-D input are solved
    independently (vectorised)."""
    g = _validate(signals)
    single = g.ndim == 1
    g = np.atleast_2d(g)
    n_tasks = g.shape[1]
    coef = n_tasks - g * g
    w = np.full_like(g, 1.0 / n_tasks)
    trace: list[np.ndarray] = []
    for _ in range(max_iter):
        nxt = project_simplex(w - step * 2.0 * coef * w)
        delta = np.max(np.abs(nxt - w))
        w = nxt
        trace.append(w.copy())
        if len(trace) > trace_len:
            trace.pop(0)
        if delta < tol:
            return w[0] if single else w
    raise ConvergenceError(
        f"projected gradient did not converge in {max_iter} iterations (last step {delta:.3e})", trace
    )


def normalize_signal(raw_loss: float) -> float:
    """Map a non-negative loss into [0, 1) with ``x / (1 + x)``."""
    x = float(raw_loss)
    if not math.isfinite(x) or x < 0.0:
        raise ValueError(f"loss must be finite and non-negative, got {raw_loss}")
    return x / (1.0 + x)


def uniform_weights(n_tasks: int) -> np.ndarray:
    return np.full(n_tasks, 1.0 / n_tasks)


def aggregate_loss(losses: Sequence, weights: Sequence[float]):
    """Weighted sum of task losses. Weights are plain constants, so the
    gradient is the weighted sum of per-task gradients."""
    if len(losses) != len(weights):
        raise ValueError(f"{len(losses)} losses but {len(weights)} weights")
    total = None
    for loss, w in zip(losses, weights):
        term = loss * float(w)
        total = term if total is None else total + term
    if isinstance(total, Tensor):
        return total
    return float(total)
