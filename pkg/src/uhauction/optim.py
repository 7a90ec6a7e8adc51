"""Quasi-Newton minimization with a backtracking line search."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

# Armijo sufficient-decrease constant and step shrink factor.
_C1 = 1e-4
_SHRINK = 0.5
_MAX_HALVINGS = 60


@dataclass
class BFGSResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    n_iter: int
    converged: bool
    reason: str
    history: list

    @property
    def grad_norm(self) -> float:
        return float(np.max(np.abs(self.grad))) if self.grad.size else 0.0


def bfgs(
    fun_grad: Callable[[np.ndarray], tuple],
    x0,
    grad_tol: float = 1e-6,
    max_iters: int = 2000,
    rel_tol: float = 1e-10,
    rel_window: int = 5,
) -> BFGSResult:
    """Minimize a smooth function given ``fun_grad(x) -> (f, g)``.

    Stops when the gradient sup-norm drops below ``grad_tol``, when the
    objective changes by less than ``rel_tol`` (relative) over ``rel_window``
    iterations, or after ``max_iters`` iterations. Accepted steps always
    satisfy the Armijo condition, so the recorded objective never increases.
    ``converged`` is True only when the gradient criterion holds.
    """
    x = np.array(x0, dtype=float)
    f, g = fun_grad(x)
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise FloatingPointError("objective is not finite at the starting point")
    n = x.size
    H = np.eye(n)
    scaled = False
    history = [float(f)]
    reason = "max_iters"
    it = 0
    for it in range(1, max_iters + 1):
        if np.max(np.abs(g)) < grad_tol:
            it -= 1
            reason = "gradient"
            break
        d = -H @ g
        slope = float(g @ d)
        if slope >= 0:
            # lost descent direction; restart from steepest descent
            H = np.eye(n)
            scaled = False
            d = -g
            slope = float(g @ d)
        t = 1.0
        for _ in range(_MAX_HALVINGS):
            x_new = x + t * d
            f_new, g_new = fun_grad(x_new)
            if np.isfinite(f_new) and f_new <= f + _C1 * t * slope:
                break
            t *= _SHRINK
        else:
            reason = "line_search"
            it -= 1
            break
        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * max(1.0, float(np.linalg.norm(s) * np.linalg.norm(y))):
            if not scaled:
                H = np.eye(n) * (sy / float(y @ y))
                scaled = True
            rho = 1.0 / sy
            Hy = H @ y
            H = H + ((sy + y @ Hy) * rho * rho) * np.outer(s, s) - rho * (np.outer(Hy, s) + np.outer(s, Hy))
        x, f, g = x_new, float(f_new), g_new
        history.append(f)
        if len(history) > rel_window:
            old = history[-1 - rel_window]
            if abs(old - f) <= rel_tol * max(1.0, abs(f)):
                reason = "objective"
                break
    if np.max(np.abs(g), initial=0.0) < grad_tol:
        reason = "gradient"
    return BFGSResult(x, float(f), g, it, reason == "gradient", reason, history)
