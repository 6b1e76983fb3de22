"""Riemannian descent on the product of unit circles (oblique manifold)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ArmijoConfig:
    init_step: float = 1.0
    contraction: float = 0.5
    c1: float = 1e-4          # sufficient-decrease coefficient
    max_halvings: int = 30


def riemannian_gradient(egrad: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Project the Euclidean gradient onto the tangent space at theta."""
    return egrad - np.real(egrad * theta.conj()) * theta


def retract(theta: np.ndarray, direction: np.ndarray, step: float) -> np.ndarray:
    """Entrywise renormalization of theta + step * direction.

    A vanishing denominator entry (step overshooting through the origin)
    halves the step and retries.
    """
    for _ in range(60):
        cand = theta + step * direction
        mag = np.abs(cand)
        if mag.min() > 1e-14:
            return cand / mag
        step *= 0.5
    return theta.copy()


def armijo_step(theta, f0, grad, f, cfg: ArmijoConfig):
    """One backtracked descent step along -riemannian_gradient.

    Returns (theta_new, f_new, step, stalled); stalled means the line search
    exhausted its halvings budget and theta is returned unchanged.
    """
    g = riemannian_gradient(grad, theta)
    gnorm2 = float(np.real(g.conj() @ g))
    if gnorm2 == 0.0:
        return theta.copy(), f0, 0.0, False
    step = cfg.init_step
    for _ in range(cfg.max_halvings):
        cand = retract(theta, -g, step)
        fc = f(cand)
        if fc <= f0 - cfg.c1 * step * gnorm2:
            return cand, fc, step, False
        step *= cfg.contraction
    return theta.copy(), f0, 0.0, True


def descend(theta, f, grad, steps: int, cfg: ArmijoConfig | None = None):
    """Run `steps` Armijo-backtracked Riemannian descent steps.

    f and grad are callables of theta; returns (theta, trace of f values,
    stalled flag of the last step).
    """
    cfg = cfg or ArmijoConfig()
    vals = [f(theta)]
    stalled = False
    for _ in range(steps):
        theta, fv, _, stalled = armijo_step(theta, vals[-1], grad(theta), f, cfg)
        vals.append(fv)
        if stalled:
            break
    return theta, np.array(vals), stalled
