"""Fit/evaluate helpers shared by the CLI and the experiment harness."""

from __future__ import annotations

from dataclasses import replace
from typing import Optional, Sequence

import numpy as np

from .dataset import FeatureView, MultiViewPairSet, PairPolicy, build_pairs
from .errors import ConfigError
from .evaluation import RankingReport, cmc_curve, fused_distance_matrix, project_views
from .optimizer import ModelMVLDML, TrainConfig, train, train_baseline_ldml
from .preprocess import pca_fit, pca_transform

__all__ = ["MODES", "make_pair_set", "fit", "evaluate", "fit_and_evaluate"]

MODES = ("ldml", "ldml+", "mvldml+")


def make_pair_set(ids, cams, views: Sequence[np.ndarray], privileged: Optional[np.ndarray],
                  policy: PairPolicy = PairPolicy()) -> MultiViewPairSet:
    pairs = build_pairs(ids, policy, cameras=cams)
    fviews = tuple(FeatureView(f"view{m}", v) for m, v in enumerate(views))
    fpriv = None if privileged is None else FeatureView("privileged", privileged)
    return MultiViewPairSet(fviews, fpriv, pairs)


def fit(
    mode: str,
    ids,
    cams,
    views: Sequence[np.ndarray],
    privileged: Optional[np.ndarray],
    config: TrainConfig = TrainConfig(),
    view_indices: Optional[Sequence[int]] = None,
    pca_energy: Optional[float] = None,
    policy: PairPolicy = PairPolicy(),
    sigma=None,
    callback=None,
) -> ModelMVLDML:
    """Train one model on raw training features.

    ``view_indices`` picks the original views to use (default: first view for
    the single-view modes, all views for ``mvldml+``). With ``pca_energy`` each
    selected view is PCA-reduced first and the transform is kept in the model.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    if view_indices is None:
        view_indices = range(len(views)) if mode == "mvldml+" else [0]
    selected = [np.asarray(views[i], dtype=np.float64) for i in view_indices]
    if mode != "mvldml+" and len(selected) != 1:
        raise ConfigError(f"mode {mode} uses exactly one view")
    if mode != "ldml" and privileged is None:
        raise ConfigError("privileged features are required for mode " + mode)
    transforms = [None] * len(selected)
    if pca_energy is not None:
        transforms = [pca_fit(x, pca_energy) for x in selected]
        selected = [pca_transform(t, x) for t, x in zip(transforms, selected)]
    pair_set = make_pair_set(ids, cams, selected, None if mode == "ldml" else privileged, policy)
    if mode == "ldml":
        model = train_baseline_ldml(pair_set, config, sigma_policy=sigma, callback=callback)
    else:
        model = train(pair_set, config, callback=callback)
    model.pca = transforms
    return model


def evaluate(model: ModelMVLDML, ids, cams, views: Sequence[np.ndarray],
             view_indices: Optional[Sequence[int]] = None,
             protocol: str = "single-shot") -> RankingReport:
    """Rank gallery (all cameras but the lowest) against probes (lowest camera)."""
    ids = np.asarray(ids)
    cams = np.asarray(cams)
    if view_indices is None:
        view_indices = range(model.n_views) if model.n_views == len(views) else [0]
    selected = project_views(model, [views[i] for i in view_indices])
    first = cams.min()
    probe = np.flatnonzero(cams == first)
    gallery = np.flatnonzero(cams != first)
    dist = fused_distance_matrix(model, [x[probe] for x in selected], [x[gallery] for x in selected])
    return cmc_curve(dist, ids[probe], ids[gallery], cams[probe], cams[gallery], protocol)


def fit_and_evaluate(mode, train_split, test_split, config: TrainConfig = TrainConfig(),
                     view_indices=None, pca_energy=None, policy: PairPolicy = PairPolicy(),
                     sigma=None, protocol="single-shot"):
    model = fit(mode, train_split.ids, train_split.cams, train_split.views,
                train_split.privileged, config, view_indices, pca_energy, policy, sigma)
    if view_indices is None:
        view_indices = range(len(test_split.views)) if mode == "mvldml+" else [0]
    report = evaluate(model, test_split.ids, test_split.cams, test_split.views,
                      list(view_indices), protocol)
    return model, report
