"""Closed-form optima of standard and adversarial cross-entropy training.

For a binary problem with true posterior ``z`` at a point, standard training
is optimal at ``alpha = z``. Against an attacker that can shift the predicted
probability by ``beta``, the per-point loss becomes
``-z log(alpha - beta) - (1 - z) log(1 - alpha - beta)``, minimized at
``alpha = z - beta (2 z - 1)``: a pull toward 1/2 that can only raise the
entropy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .attacks import AttackConfig, attack_rows, prediction
from .data import MixtureSpec, true_posterior
from .errors import DomainError, InputError
from .metrics import entropy
from .nn import ModelParams


def _check_z(z):
    if not 0.0 <= z <= 1.0:
        raise DomainError(f"z must lie in [0, 1], got {z}")


def _check_beta(beta):
    if not 0.0 <= beta < 0.5:
        raise DomainError(f"beta must lie in [0, 0.5), got {beta}")


def optimal_alpha_clean(z: float) -> float:
    _check_z(z)
    return float(z)


def optimal_alpha_adv(z: float, beta: float) -> float:
    _check_z(z)
    _check_beta(beta)
    return z - beta * (2.0 * z - 1.0)


def adversarial_loss(alpha, z, beta):
    alpha = np.asarray(alpha, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        return -z * np.log(alpha - beta) - (1.0 - z) * np.log(1.0 - alpha - beta)


def adversarial_loss_derivative(alpha, z, beta):
    return (1.0 - z) / (1.0 - alpha - beta) - z / (alpha - beta)


def grid_oracle_alpha(z: float, beta: float, grid_n: int = 1_000_000, chunk: int = 1 << 18) -> float:
    """Exhaustive argmin of the adversarial loss over a uniform alpha grid.

    The grid has ``grid_n`` points in ``(beta, 1 - beta)``, inset half a step
    from each end so both logs stay finite.
    """
    _check_z(z)
    _check_beta(beta)
    if grid_n < 3:
        raise InputError("grid_n must be >= 3")
    h = (1.0 - 2.0 * beta) / grid_n
    best_val, best_alpha = math.inf, None
    for start in range(0, grid_n, chunk):
        i = np.arange(start, min(start + chunk, grid_n))
        alpha = beta + (i + 0.5) * h
        vals = adversarial_loss(alpha, z, beta)
        k = int(np.argmin(vals))
        if vals[k] < best_val:
            best_val, best_alpha = float(vals[k]), float(alpha[k])
    return best_alpha


def binary_entropy(a):
    return float(entropy(np.array([a, 1.0 - a])))


def entropy_gap(z: float, beta: float) -> float:
    """Entropy of the adversarial optimum minus entropy of the clean one."""
    alpha = optimal_alpha_adv(z, beta)
    return binary_entropy(alpha) - binary_entropy(z)


@dataclass(frozen=True)
class EquilibriumPoint:
    z: float
    beta: float
    alpha_closed: float
    alpha_oracle: float
    entropy_standard: float
    entropy_robust: float

    @property
    def gap(self) -> float:
        return self.entropy_robust - self.entropy_standard


def equilibrium_point(z, beta, grid_n=1_000_000) -> EquilibriumPoint:
    alpha = optimal_alpha_adv(z, beta)
    return EquilibriumPoint(
        z, beta, alpha, grid_oracle_alpha(z, beta, grid_n), binary_entropy(z), binary_entropy(alpha)
    )


def default_lattice():
    """50 z values 0.01..0.99 and 20 beta values 0..0.475."""
    zs = np.round(np.linspace(0.01, 0.99, 50), 12)
    betas = np.round(np.arange(20) * 0.025, 12)
    return zs, betas


# --- attack strength ---------------------------------------------------------


def estimate_beta(params: ModelParams, x, delta, class_index=None):
    """Per-class shift |f_c(x) - f_c(x + delta)| / sqrt(2).

    Returns the value for ``class_index``, or the worst class when it is None.
    Batches give one value per row.
    """
    x = np.asarray(x, dtype=np.float64)
    shift = np.abs(nn.forward(params, x) - nn.forward(params, x + np.asarray(delta))) / math.sqrt(2.0)
    if class_index is None:
        return shift.max(axis=-1)
    return shift[..., class_index]


def empirical_beta(params: ModelParams, X, cfg: AttackConfig, threads=1) -> float:
    """Mean worst-class beta under an untargeted attack on the predicted class."""
    X = np.asarray(X, dtype=np.float64)
    yhat = nn.argmax(nn.forward(params, X))
    res = attack_rows(params, X, yhat, np.arange(len(X)), prediction, cfg, threads=threads)
    return float(np.mean(estimate_beta(params, X, res.delta)))


@dataclass
class ConvergenceReport:
    x: np.ndarray
    z: np.ndarray
    alpha_model: np.ndarray
    target: np.ndarray

    @property
    def abs_dev(self) -> np.ndarray:
        return np.abs(self.alpha_model - self.target)

    @property
    def mean_dev(self) -> float:
        return float(self.abs_dev.mean())

    @property
    def max_dev(self) -> float:
        return float(self.abs_dev.max())


def convergence_check(
    params: ModelParams, spec: MixtureSpec, probe_grid, mode="standard", beta_estimate=0.0
) -> ConvergenceReport:
    """Compare the model's class-1 probability with the predicted optimum.

    The target is the Bayes posterior ``z`` in standard mode and
    ``z - beta (2 z - 1)`` in adversarial mode.
    """
    if spec.num_classes != 2 or params.num_classes != 2:
        raise InputError("convergence check needs a binary spec and model")
    X = np.asarray(probe_grid, dtype=np.float64)
    z = true_posterior(spec, X)[:, 1]
    if mode == "standard":
        target = z.copy()
    elif mode == "adversarial":
        _check_beta(beta_estimate)
        target = z - beta_estimate * (2.0 * z - 1.0)
    else:
        raise InputError(f"unknown mode {mode!r}")
    alpha = nn.forward(params, X)[:, 1]
    return ConvergenceReport(X, z, alpha, target)
