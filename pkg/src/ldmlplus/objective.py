"""Pairwise log-loss objectives for the global- and local-threshold models."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .dataset import MultiViewPairSet, ScaleParams, mean_pair_sq_distance
from .errors import ContractError, InputError
from .metric import pairwise_mahalanobis_sq

__all__ = [
    "HyperParams",
    "ViewWeights",
    "log_loss",
    "decision_local",
    "decision_global",
    "regularizer",
    "resolve_sigma",
    "pair_losses",
    "partial_objective",
    "objective_mv",
    "baseline_objective",
]

MEAN_EUCLIDEAN = "mean-euclidean"


@dataclass(frozen=True)
class HyperParams:
    """Regularization weight ``lam``, view-weight exponent ``r`` and baseline threshold."""

    lam: float = 1e-3
    r: float = 3.0
    global_sigma: Union[float, str] = MEAN_EUCLIDEAN

    def __post_init__(self):
        if not self.lam >= 0:
            raise InputError("lam must be non-negative")
        if not self.r > 1:
            raise InputError("r must be greater than 1")
        if isinstance(self.global_sigma, str):
            if self.global_sigma != MEAN_EUCLIDEAN:
                raise InputError(f"unknown sigma policy {self.global_sigma!r}")
        elif not self.global_sigma > 0:
            raise InputError("global_sigma must be positive")


@dataclass(frozen=True)
class ViewWeights:
    weights: tuple

    def __post_init__(self):
        w = tuple(float(a) for a in self.weights)
        if not w or any(not (a > 0 and np.isfinite(a)) for a in w):
            raise InputError(f"view weights must be positive: {w}")
        if abs(sum(w) - 1.0) > 1e-12:
            raise InputError(f"view weights must sum to 1, got {sum(w)!r}")
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, n_views: int) -> "ViewWeights":
        return cls((1.0 / n_views,) * n_views)

    def __len__(self) -> int:
        return len(self.weights)

    def __getitem__(self, m: int) -> float:
        return self.weights[m]

    def powered(self, r: float) -> np.ndarray:
        return np.asarray(self.weights) ** r


def log_loss(u):
    """``ln(1 + exp(-u))`` evaluated without overflow; works on scalars and arrays."""
    u = np.asarray(u, dtype=np.float64)
    out = np.maximum(-u, 0.0) + np.log1p(np.exp(-np.abs(u)))
    return float(out) if out.ndim == 0 else out


def decision_local(d_orig_sq, d_priv_sq, beta):
    """Local-threshold decision value ``beta * d_priv_sq - d_orig_sq``."""
    return beta * d_priv_sq - d_orig_sq


def decision_global(d_orig_sq, sigma):
    """Global-threshold decision value ``sigma - d_orig_sq``."""
    if not sigma > 0:
        raise InputError("sigma must be positive")
    return sigma - d_orig_sq


def regularizer(p) -> float:
    """Squared Frobenius norm of ``p`` divided by its dimension."""
    p = np.asarray(getattr(p, "matrix", p), dtype=np.float64)
    return float(np.sum(p * p) / p.shape[0])


def resolve_sigma(hp: HyperParams, pair_set: MultiViewPairSet, view: int = 0) -> float:
    if hp.global_sigma == MEAN_EUCLIDEAN:
        return mean_pair_sq_distance(pair_set, view)
    return float(hp.global_sigma)


def pair_losses(decisions: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return log_loss(labels * decisions)


def _weighted_loss(decisions, pair_set: MultiViewPairSet) -> float:
    # np.sum uses pairwise summation; keeps the reduction order fixed
    return float(np.sum(pair_set.weights * pair_losses(decisions, pair_set.labels)))


def _matrix(x) -> np.ndarray:
    return np.asarray(getattr(x, "matrix", x), dtype=np.float64)


def partial_objective(
    pair_set: MultiViewPairSet, view_index: int, metric, p, beta: float, hp: HyperParams
) -> float:
    """Weighted log loss of one view under the local threshold plus ``lam * R(P)``."""
    pmat = _matrix(p)
    d_orig = pairwise_mahalanobis_sq(_matrix(metric), pair_set.view_diffs(view_index))
    d_priv = pairwise_mahalanobis_sq(pmat, pair_set.privileged_diffs())
    f = beta * d_priv - d_orig
    return _weighted_loss(f, pair_set) + hp.lam * regularizer(pmat)


def objective_mv(
    pair_set: MultiViewPairSet,
    metrics: Sequence,
    p,
    weights: ViewWeights,
    betas: ScaleParams,
    hp: HyperParams,
) -> float:
    """Multi-view objective ``sum_m a_m^r * F_m``."""
    n = pair_set.n_views
    if not (len(metrics) == len(weights) == len(betas) == n):
        raise ContractError(
            f"view count mismatch: {n} views, {len(metrics)} metrics, "
            f"{len(weights)} weights, {len(betas)} betas"
        )
    ar = weights.powered(hp.r)
    total = 0.0
    for m in range(n):
        total += ar[m] * partial_objective(pair_set, m, metrics[m], p, betas[m], hp)
    return float(total)


def baseline_objective(
    pair_set: MultiViewPairSet, metric, sigma: float, view: int = 0
) -> float:
    """Global-threshold objective: weighted log loss of ``sigma - d_M^2``."""
    d_orig = pairwise_mahalanobis_sq(_matrix(metric), pair_set.view_diffs(view))
    return _weighted_loss(sigma - d_orig, pair_set)
