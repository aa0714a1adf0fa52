"""Alternating projected-gradient training for LDML+, MVLDML+ and the LDML baseline.

One outer iteration updates each view metric in turn, then the privileged
metric, then the view weights. Metric blocks take a projected gradient step
whose size is found by halving until the objective strictly decreases.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, List, NamedTuple, Optional, Sequence

import numpy as np
from scipy.special import expit
from threadpoolctl import threadpool_limits

from .dataset import MultiViewPairSet, ScaleParams, compute_betas
from .errors import ContractError, InputError, NumericalError
from .metric import PsdMetric, identity_metric, pairwise_mahalanobis_sq, psd_project, symmetrize
from .objective import HyperParams, ViewWeights, pair_losses, regularizer, resolve_sigma

log = logging.getLogger(__name__)

__all__ = [
    "StepSizeState",
    "StepResult",
    "TrainConfig",
    "ModelMVLDML",
    "grad_m",
    "grad_p",
    "grad_baseline",
    "step_metric",
    "solve_view_weights",
    "train",
    "train_baseline_ldml",
]


@dataclass(frozen=True)
class StepSizeState:
    """Step size of one metric block.

    ``eta_first`` is the first accepted step; growable blocks double their
    step after every acceptance but never beyond ``cap_factor * eta_first``.
    """

    eta: float
    cap_factor: float = 2.0 ** 5
    growable: bool = True
    eta_first: Optional[float] = None

    def __post_init__(self):
        if not self.eta > 0:
            raise InputError("step size must be positive")
        if not self.cap_factor > 1:
            raise InputError("cap factor must exceed 1")


class StepResult(NamedTuple):
    metric: PsdMetric
    state: StepSizeState
    accepted: bool


@dataclass(frozen=True)
class TrainConfig:
    hp: HyperParams = field(default_factory=HyperParams)
    eta0_m: float = 2.0 ** 20
    eta0_p: float = 2.0 ** 15
    cap_s: float = 2.0 ** 5
    max_iters: int = 400
    rel_tol: float = 1e-4
    seed: int = 0
    use_beta: bool = True
    beta_over: str = "pairs"
    freeze_p: bool = False
    min_eta: float = 1e-30

    def __post_init__(self):
        for name in ("eta0_m", "eta0_p", "rel_tol", "min_eta"):
            if not getattr(self, name) > 0:
                raise InputError(f"{name} must be positive")
        if not self.cap_s > 1:
            raise InputError("cap_s must exceed 1")
        if self.max_iters < 1:
            raise InputError("max_iters must be >= 1")


@dataclass(eq=False)
class ModelMVLDML:
    """A trained model.

    For ``mode == "ldml"`` there is no privileged metric, ``betas`` is ``None``
    and ``sigma`` holds the global threshold. ``pca`` holds an optional
    per-view transform applied to raw features before the metric.
    """

    mode: str
    metrics: List[PsdMetric]
    privileged_metric: Optional[PsdMetric]
    view_weights: ViewWeights
    betas: Optional[ScaleParams]
    history: List[float]
    converged: bool
    sigma: Optional[float] = None
    pca: list = field(default_factory=list)
    eta_trace: dict = field(default_factory=dict)
    eta_first: dict = field(default_factory=dict)

    @property
    def n_views(self) -> int:
        return len(self.metrics)

    @property
    def n_iters(self) -> int:
        return len(self.history) - 1

    def view_dims(self) -> list:
        if self.pca and any(t is not None for t in self.pca):
            return [t.dim if t is not None else m.dim for t, m in zip(self.pca, self.metrics)]
        return [m.dim for m in self.metrics]


def _loss_coefficients(decisions, pair_set, scale):
    # d/dM of w L(y (t - d^T M d)) = w y sigmoid(-y f) d d^T
    y = pair_set.labels
    return scale * pair_set.weights * y * expit(-y * decisions)


def _outer_sum(diffs: np.ndarray, coef: np.ndarray) -> np.ndarray:
    return symmetrize(diffs.T @ (coef[:, None] * diffs))


def _ar(weights_a, r):
    if isinstance(weights_a, ViewWeights):
        return weights_a.powered(r)
    return np.asarray(weights_a, dtype=np.float64) ** r


def grad_m(pair_set, view_index, metric, p, beta, weights_a, hp: HyperParams) -> np.ndarray:
    """Gradient of the multi-view objective with respect to one view metric."""
    d = pair_set.view_diffs(view_index)
    f = beta * pairwise_mahalanobis_sq(p, pair_set.privileged_diffs()) - pairwise_mahalanobis_sq(
        metric, d
    )
    ar = _ar(weights_a, hp.r)[view_index]
    return _outer_sum(d, _loss_coefficients(f, pair_set, ar))


def grad_p(pair_set, metrics, p, betas, weights_a, hp: HyperParams) -> np.ndarray:
    """Gradient of the multi-view objective with respect to the privileged metric."""
    ar = _ar(weights_a, hp.r)
    pmat = np.asarray(getattr(p, "matrix", p), dtype=np.float64)
    dp = pair_set.privileged_diffs()
    d_priv = pairwise_mahalanobis_sq(pmat, dp)
    coef = np.zeros(pair_set.n_pairs)
    for m in range(pair_set.n_views):
        f = betas[m] * d_priv - pairwise_mahalanobis_sq(metrics[m], pair_set.view_diffs(m))
        coef -= _loss_coefficients(f, pair_set, ar[m] * betas[m])
    reg = 2.0 * hp.lam / pmat.shape[0] * float(np.sum(ar)) * pmat
    return _outer_sum(dp, coef) + symmetrize(reg)


def grad_baseline(pair_set, metric, sigma: float, view: int = 0) -> np.ndarray:
    """Gradient of the global-threshold objective with respect to the metric."""
    d = pair_set.view_diffs(view)
    f = sigma - pairwise_mahalanobis_sq(metric, d)
    return _outer_sum(d, _loss_coefficients(f, pair_set, 1.0))


def step_metric(
    current: PsdMetric,
    gradient: np.ndarray,
    state: StepSizeState,
    accept: Callable[[PsdMetric], bool],
    min_eta: float = 1e-30,
) -> StepResult:
    """Projected gradient step with step-halving until ``accept(candidate)`` holds.

    On acceptance a growable state doubles its step (capped at
    ``cap_factor * eta_first``); a non-growable state keeps the accepted step.
    A zero gradient or a step shrinking below ``min_eta`` is a stall: the
    current metric and the incoming state are returned with ``accepted=False``.
    """
    gradient = np.asarray(gradient, dtype=np.float64)
    if gradient.shape != current.matrix.shape:
        raise ContractError(f"gradient shape {gradient.shape} != metric shape {current.matrix.shape}")
    if not np.any(gradient):
        return StepResult(current, state, False)
    eta = state.eta
    while eta >= min_eta:
        candidate = psd_project(current.matrix - eta * gradient)
        if accept(candidate):
            first = state.eta_first if state.eta_first is not None else eta
            nxt = min(2.0 * eta, state.cap_factor * first) if state.growable else eta
            return StepResult(candidate, replace(state, eta=nxt, eta_first=first), True)
        eta *= 0.5
    return StepResult(current, state, False)


def solve_view_weights(partials: Sequence[float], r: float) -> ViewWeights:
    """Closed-form minimizer of ``sum_m a_m^r F_m`` over the probability simplex."""
    f = np.asarray(partials, dtype=np.float64)
    if f.ndim != 1 or f.size == 0:
        raise InputError("need at least one partial objective")
    if not np.all(f > 0) or not np.all(np.isfinite(f)):
        raise InputError(f"partial objectives must be positive and finite: {f}")
    if not r > 1:
        raise InputError("r must be greater than 1")
    # (1/F_m)^(1/(r-1)), rescaled by min F for range safety
    q = (f.min() / f) ** (1.0 / (r - 1.0))
    return ViewWeights(tuple(q / q.sum()))


class _Block:
    """Mutable bookkeeping for one metric block during training."""

    def __init__(self, name, metric, state):
        self.name = name
        self.metric = metric
        self.state = state
        self.trace = []


def _validate(pair_set: MultiViewPairSet, privileged: bool):
    if privileged and pair_set.privileged is None:
        raise InputError("LDML+ training requires privileged features")


def _run(pair_set, config, thresholds_fn, privileged, betas, callback):
    # multi-threaded BLAS changes reduction order, hence the last bits of every result
    with threadpool_limits(limits=1, user_api="blas"):
        return _run_pinned(pair_set, config, thresholds_fn, privileged, betas, callback)


def _run_pinned(pair_set, config, thresholds_fn, privileged, betas, callback):
    hp = config.hp
    n_views = pair_set.n_views
    r = hp.r
    blocks = [
        _Block(f"M{m}", identity_metric(d), StepSizeState(config.eta0_m, config.cap_s, True))
        for m, d in enumerate(pair_set.view_dims())
    ]
    pblock = None
    if privileged:
        pblock = _Block(
            "P",
            identity_metric(pair_set.privileged.dim),
            StepSizeState(config.eta0_p, config.cap_s, False),
        )
    weights = ViewWeights.uniform(n_views)
    labels, pw = pair_set.labels, pair_set.weights

    def loss(decisions):
        return float(np.sum(pw * pair_losses(decisions, labels)))

    d_orig = [pairwise_mahalanobis_sq(b.metric, pair_set.view_diffs(m)) for m, b in enumerate(blocks)]
    if not all(np.all(np.isfinite(d)) for d in d_orig):
        raise NumericalError("pair distances overflow; rescale the features")

    def state_of(pmetric):
        if pmetric is None:
            return None, 0.0
        d_priv = pairwise_mahalanobis_sq(pmetric, pair_set.privileged_diffs())
        return d_priv, hp.lam * regularizer(pmetric)

    d_priv, reg = state_of(pblock.metric if pblock else None)

    def partial(m, dm, dp, rg):
        return loss(thresholds_fn(m, dp) - dm) + rg

    partials = [partial(m, d_orig[m], d_priv, reg) for m in range(n_views)]

    def total(ar, parts):
        j = 0.0
        for m in range(n_views):
            j += ar[m] * parts[m]
        return j

    ar = weights.powered(r)
    j_cur = total(ar, partials)
    if not np.isfinite(j_cur):
        raise NumericalError(f"initial objective is not finite ({j_cur}); rescale the features")
    history = [j_cur]
    converged = False

    def emit(it, block, accepted):
        if callback is not None:
            callback(dict(iteration=it, block=block.name, metric=block.metric,
                          accepted=accepted, eta=block.state.eta))

    for it in range(1, config.max_iters + 1):
        for m, blk in enumerate(blocks):
            f = thresholds_fn(m, d_priv) - d_orig[m]
            g = _outer_sum(pair_set.view_diffs(m), _loss_coefficients(f, pair_set, ar[m]))
            seen = {}

            def accept(cand, m=m):
                dm = pairwise_mahalanobis_sq(cand, pair_set.view_diffs(m))
                val = partial(m, dm, d_priv, reg)
                seen["dm"], seen["val"] = dm, val
                return val < partials[m]

            res = step_metric(blk.metric, g, blk.state, accept, config.min_eta)
            if res.accepted:
                blk.metric, blk.state = res.metric, res.state
                d_orig[m], partials[m] = seen["dm"], seen["val"]
                blk.trace.append(blk.state.eta)
            emit(it, blk, res.accepted)
        j_cur = total(ar, partials)

        if pblock is not None and not config.freeze_p:
            g = grad_p(pair_set, [b.metric for b in blocks], pblock.metric, betas, weights, hp)
            seen = {}

            def accept_p(cand):
                dp, rg = state_of(cand)
                parts = [partial(m, d_orig[m], dp, rg) for m in range(n_views)]
                val = total(ar, parts)
                seen.update(dp=dp, rg=rg, parts=parts, val=val)
                return val < j_cur

            res = step_metric(pblock.metric, g, pblock.state, accept_p, config.min_eta)
            if res.accepted:
                pblock.metric, pblock.state = res.metric, res.state
                d_priv, reg, partials, j_cur = seen["dp"], seen["rg"], seen["parts"], seen["val"]
                pblock.trace.append(pblock.state.eta)
            emit(it, pblock, res.accepted)

        if privileged:
            new_w = solve_view_weights(partials, r)
            new_ar = new_w.powered(r)
            j_new = total(new_ar, partials)
            # closed form is optimal in exact arithmetic; guard against round-off ascent
            if j_new <= j_cur:
                weights, ar, j_cur = new_w, new_ar, j_new

        j_prev = history[-1]
        history.append(j_cur)
        if j_prev == 0.0 or abs(j_cur - j_prev) / abs(j_prev) <= config.rel_tol:
            converged = True
            break

    log.debug("training stopped after %d iterations, J=%.6g", len(history) - 1, j_cur)
    return blocks, pblock, weights, history, converged


def train(
    pair_set: MultiViewPairSet,
    config: TrainConfig = TrainConfig(),
    betas: Optional[ScaleParams] = None,
    callback: Optional[Callable[[dict], None]] = None,
) -> ModelMVLDML:
    """Train LDML+ (one view) or MVLDML+ (several views) by alternating minimization.

    Parameters
    ----------
    pair_set : MultiViewPairSet
        Must carry privileged features.
    config : TrainConfig
    betas : ScaleParams, optional
        Scale parameters; computed from the pair set when omitted (or all ones
        when ``config.use_beta`` is false).
    callback : callable, optional
        Called after every block update with a dict holding ``iteration``,
        ``block``, ``metric``, ``accepted`` and ``eta``.
    """
    _validate(pair_set, privileged=True)
    if betas is None:
        if config.use_beta:
            betas = compute_betas(pair_set, over=config.beta_over)
        else:
            betas = ScaleParams((1.0,) * pair_set.n_views)
    if len(betas) != pair_set.n_views:
        raise ContractError(f"{len(betas)} betas for {pair_set.n_views} views")
    beta_arr = betas.betas

    def thresholds(m, d_priv):
        return beta_arr[m] * d_priv

    blocks, pblock, weights, history, converged = _run(
        pair_set, config, thresholds, True, betas, callback
    )
    return ModelMVLDML(
        mode="ldml+" if pair_set.n_views == 1 else "mvldml+",
        metrics=[b.metric for b in blocks],
        privileged_metric=pblock.metric,
        view_weights=weights,
        betas=betas,
        history=history,
        converged=converged,
        eta_trace={b.name: list(b.trace) for b in blocks + [pblock]},
        eta_first={b.name: b.state.eta_first for b in blocks + [pblock]},
    )


def train_baseline_ldml(
    pair_set: MultiViewPairSet,
    config: TrainConfig = TrainConfig(),
    sigma_policy=None,
    callback: Optional[Callable[[dict], None]] = None,
) -> ModelMVLDML:
    """Train the global-threshold LDML baseline on the first view.

    ``sigma_policy`` overrides ``config.hp.global_sigma``: a positive number,
    or ``"mean-euclidean"`` for the average squared Euclidean pair distance.
    """
    if pair_set.n_views != 1:
        pair_set = pair_set.single_view(0)
    hp = config.hp
    if sigma_policy is not None:
        hp = replace(hp, global_sigma=sigma_policy)
        config = replace(config, hp=hp)
    sigma = resolve_sigma(hp, pair_set)

    def thresholds(m, d_priv):
        return sigma

    blocks, _, weights, history, converged = _run(
        pair_set, config, thresholds, False, None, callback
    )
    return ModelMVLDML(
        mode="ldml",
        metrics=[blocks[0].metric],
        privileged_metric=None,
        view_weights=weights,
        betas=None,
        history=history,
        converged=converged,
        sigma=sigma,
        eta_trace={blocks[0].name: list(blocks[0].trace)},
        eta_first={blocks[0].name: blocks[0].state.eta_first},
    )
