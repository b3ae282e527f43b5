"""Per-task risk functionals and empirical tail statistics.

The tail machinery operates on a batch of per-task scalar risks: pick the
floor(q*b) highest-risk tasks (q being the retained fraction of the batch),
estimate the value-at-risk as the smallest retained risk, and the
conditional value-at-risk as the retained mean. The retained mean is the
robust training objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .metamodel import PredictiveOutput

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
# Tolerance so that q*b lands on the intended integer when q carries float
# representation error (e.g. 0.3 * 10).
_FLOOR_EPS = 1e-9


@dataclass(frozen=True)
class RiskVector:
    """Per-task scalar risks for one batch, with parallel task ids."""

    values: np.ndarray
    task_ids: np.ndarray

    def __post_init__(self):
        if len(self.values) != len(self.task_ids):
            raise ValueError("values and task_ids lengths differ")
        if len(self.values) and not np.isfinite(self.values).all():
            raise ValueError("risk values must be finite")

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class TailSpec:
    """Retained fraction q of a batch; floor(q*b) must be at least 1."""

    tail_fraction: float = 0.4

    def __post_init__(self):
        if not 0.0 < self.tail_fraction <= 1.0:
            raise ConfigError(
                f"tail_fraction: must be in (0, 1], got {self.tail_fraction}"
            )

    def count(self, batch_size: int) -> int:
        k = int(math.floor(self.tail_fraction * batch_size + _FLOOR_EPS))
        if k < 1:
            raise ConfigError(
                f"tail_fraction={self.tail_fraction} retains 0 of {batch_size} tasks"
            )
        return k


def gaussian_nll_risk(target: np.ndarray, pred: PredictiveOutput) -> float:
    """Per-step mean of the Gaussian negative log density (constant terms of
    the data distribution dropped)."""
    target = np.asarray(target, dtype=float)
    mu = np.asarray(pred.mu, dtype=float)
    sigma = np.asarray(pred.sigma, dtype=float)
    if target.shape != mu.shape:
        raise ValueError(f"target shape {target.shape} != prediction shape {mu.shape}")
    if not (sigma > 0).all():
        raise ValueError("sigma must be strictly positive")
    z = (target - mu) / sigma
    return float(np.mean(np.log(sigma) + _HALF_LOG_2PI + 0.5 * z * z))


def rmse_risk(target: np.ndarray, pred: PredictiveOutput) -> float:
    """Root mean squared error of the predictive mean; ignores sigma."""
    target = np.asarray(target, dtype=float)
    mu = np.asarray(pred.mu, dtype=float)
    if target.shape != mu.shape:
        raise ValueError(f"target shape {target.shape} != prediction shape {mu.shape}")
    return float(np.sqrt(np.mean((target - mu) ** 2)))


def tail_order(values: np.ndarray) -> np.ndarray:
    """Positions ordered by descending value, ties broken by lower position."""
    values = np.asarray(values)
    return np.lexsort((np.arange(len(values)), -values))


def select_tail(risks: RiskVector, spec: TailSpec) -> np.ndarray:
    """Positions of the floor(q*b) largest risks, sorted by descending risk
    then ascending position."""
    b = len(risks)
    if b < 1:
        raise ValueError("risk vector must be nonempty")
    k = spec.count(b)
    return tail_order(risks.values)[:k]


def empirical_var(risks: RiskVector, spec: TailSpec) -> float:
    """Monte Carlo value-at-risk estimate: the smallest retained risk."""
    sel = select_tail(risks, spec)
    return float(risks.values[sel].min())


def empirical_cvar(risks: RiskVector, spec: TailSpec) -> float:
    """Monte Carlo conditional value-at-risk estimate: the retained mean."""
    sel = select_tail(risks, spec)
    return float(risks.values[sel].mean())
