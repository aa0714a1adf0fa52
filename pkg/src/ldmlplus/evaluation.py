"""Test-time fused distances and ranking metrics (CMC, mAP), plus distance histograms."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dataset import MultiViewPairSet
from .errors import ContractError, InputError
from .metric import PsdMetric, pairwise_mahalanobis_sq
from .preprocess import pca_transform

__all__ = [
    "RankingReport",
    "Histogram",
    "fused_distance_sq",
    "fused_distance_matrix",
    "project_views",
    "cmc_curve",
    "mean_average_precision",
    "multi_query_aggregate",
    "distance_histograms",
    "overlap_coefficient",
]

PROTOCOLS = ("single-shot", "market")


@dataclass
class RankingReport:
    """CMC values (``cmc[k-1]`` is the rank-``k`` rate) and mAP of one evaluation."""

    cmc: np.ndarray
    map: float
    n_probes: int
    protocol: str = "single-query"
    n_excluded: int = 0
    extras: dict = field(default_factory=dict)

    def rank(self, k: int) -> float:
        return float(self.cmc[k - 1])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cmc"] = [float(v) for v in self.cmc]
        d["map"] = float(self.map)
        return d

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["rank", "cmc"])
            for k, v in enumerate(self.cmc, start=1):
                w.writerow([k, repr(float(v))])


def project_views(model, views: Sequence[np.ndarray]) -> list:
    """Apply the model's stored per-view PCA (if any) to raw view features."""
    if len(views) != model.n_views:
        raise ContractError(f"model has {model.n_views} views, got {len(views)}")
    out = []
    for m, x in enumerate(views):
        t = model.pca[m] if model.pca else None
        out.append(np.asarray(x, dtype=np.float64) if t is None else pca_transform(t, x))
    return out


def fused_distance_sq(model, probe: Sequence[np.ndarray], gallery_item: Sequence[np.ndarray]) -> float:
    """``sum_m a_m (x_p - x_g)^T M^m (x_p - x_g)`` for one probe/gallery pair.

    Inputs are per-view vectors already in the metric space (after any PCA).
    """
    if len(probe) != model.n_views or len(gallery_item) != model.n_views:
        raise ContractError("probe/gallery view count does not match the model")
    total = 0.0
    for a, metric, xp, xg in zip(model.view_weights.weights, model.metrics, probe, gallery_item):
        diff = np.asarray(xp, dtype=np.float64) - np.asarray(xg, dtype=np.float64)
        if diff.shape != (metric.dim,):
            raise ContractError(f"expected vectors of dim {metric.dim}, got {diff.shape}")
        total += a * max(float(diff @ metric.matrix @ diff), 0.0)
    return total


def _sq_euclidean(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = np.einsum("ij,ij->i", a, a)[:, None] + np.einsum("ij,ij->i", b, b)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def fused_distance_matrix(model, probe_views, gallery_views, method: str = "embedding") -> np.ndarray:
    """Probe-by-gallery matrix of fused squared distances.

    ``method="embedding"`` uses the low-rank factors; ``"quadratic"`` forms every
    difference vector explicitly (slow, used as a cross-check).
    """
    if len(probe_views) != model.n_views or len(gallery_views) != model.n_views:
        raise ContractError("view count does not match the model")
    n_p = np.asarray(probe_views[0]).shape[0]
    n_g = np.asarray(gallery_views[0]).shape[0]
    out = np.zeros((n_p, n_g))
    for a, metric, xp, xg in zip(model.view_weights.weights, model.metrics, probe_views, gallery_views):
        xp = np.asarray(xp, dtype=np.float64)
        xg = np.asarray(xg, dtype=np.float64)
        if xp.shape[1] != metric.dim or xg.shape[1] != metric.dim:
            raise ContractError(f"feature dim does not match metric dim {metric.dim}")
        if method == "embedding":
            out += a * _sq_euclidean(xp @ metric.factor, xg @ metric.factor)
        elif method == "quadratic":
            diffs = (xp[:, None, :] - xg[None, :, :]).reshape(-1, metric.dim)
            out += a * np.maximum(pairwise_mahalanobis_sq(metric.matrix, diffs), 0.0).reshape(n_p, n_g)
        else:
            raise InputError(f"unknown distance method {method!r}")
    return out


def _ranked_matches(distances, probe_ids, gallery_ids, probe_cams, gallery_cams, protocol):
    """Yield, per probe, the boolean relevance vector of the ranked, filtered gallery."""
    dist = np.asarray(distances, dtype=np.float64)
    probe_ids = np.asarray(probe_ids)
    gallery_ids = np.asarray(gallery_ids)
    if dist.shape != (probe_ids.size, gallery_ids.size):
        raise ContractError(
            f"distance matrix {dist.shape} vs {probe_ids.size} probes x {gallery_ids.size} gallery"
        )
    if protocol not in PROTOCOLS:
        raise InputError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    if protocol == "market":
        if probe_cams is None or gallery_cams is None:
            raise InputError("market protocol requires camera ids")
        probe_cams = np.asarray(probe_cams)
        gallery_cams = np.asarray(gallery_cams)
    order = np.argsort(dist, axis=1, kind="stable")
    for q in range(dist.shape[0]):
        idx = order[q]
        match = gallery_ids[idx] == probe_ids[q]
        if protocol == "market":
            junk = match & (gallery_cams[idx] == probe_cams[q])
            match = match[~junk]
        yield match


def _cmc_and_ap(distances, probe_ids, gallery_ids, probe_cams, gallery_cams, protocol):
    n_gallery = np.asarray(distances).shape[1]
    hits = np.zeros(n_gallery)
    aps = []
    excluded = 0
    for match in _ranked_matches(distances, probe_ids, gallery_ids, probe_cams, gallery_cams, protocol):
        pos = np.flatnonzero(match)
        if pos.size == 0:
            excluded += 1
            continue
        hits[pos[0]:] += 1.0
        precision_at_hits = np.arange(1, pos.size + 1) / (pos + 1.0)
        # correctly rounded sums keep AP independent of summation order
        aps.append(math.fsum(precision_at_hits.tolist()) / pos.size)
    valid = len(aps)
    if valid == 0:
        raise InputError("no probe has a valid gallery match")
    return hits / valid, math.fsum(aps) / valid, valid, excluded


def cmc_curve(
    distances,
    probe_ids,
    gallery_ids,
    probe_cams=None,
    gallery_cams=None,
    protocol: str = "single-shot",
    query_mode: str = "single-query",
) -> RankingReport:
    """CMC over the gallery ranking of every probe (ties broken by gallery index).

    With ``protocol="market"`` gallery entries sharing both identity and camera
    with the probe are removed before ranking. Probes left without any correct
    match are dropped from the denominator and counted in ``n_excluded``.
    The returned report also carries mAP.
    """
    cmc, mean_ap, valid, excluded = _cmc_and_ap(
        distances, probe_ids, gallery_ids, probe_cams, gallery_cams, protocol
    )
    return RankingReport(cmc, mean_ap, valid, query_mode, excluded)


def mean_average_precision(
    distances, probe_ids, gallery_ids, probe_cams=None, gallery_cams=None, protocol="single-shot"
) -> float:
    """Mean over probes of average precision of the ranked gallery list."""
    return _cmc_and_ap(distances, probe_ids, gallery_ids, probe_cams, gallery_cams, protocol)[1]


def multi_query_aggregate(distances, probe_groups, mode: str = "min"):
    """Pool probe-image rows into one row per query group.

    Returns ``(aggregated, keys)`` where ``keys`` are the sorted unique group
    labels and row ``i`` of ``aggregated`` pools all rows labeled ``keys[i]``
    by ``min`` or ``mean``.
    """
    dist = np.asarray(distances, dtype=np.float64)
    groups = np.asarray(probe_groups)
    if groups.shape != (dist.shape[0],):
        raise ContractError("one group label per probe row is required")
    if mode not in ("min", "mean"):
        raise InputError(f"unknown pooling mode {mode!r}")
    if groups.size == 0:
        raise InputError("empty probe grouping")
    keys = np.unique(groups)
    pool = np.min if mode == "min" else np.mean
    rows = [pool(dist[groups == k], axis=0) for k in keys]
    return np.vstack(rows), keys


@dataclass
class Histogram:
    """Normalized (unit-area) histograms of positive and negative pair distances."""

    edges: np.ndarray
    positive: np.ndarray
    negative: np.ndarray

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.edges)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_left", "bin_right", "positive_density", "negative_density"])
            for lo, hi, p, n in zip(self.edges[:-1], self.edges[1:], self.positive, self.negative):
                w.writerow([repr(float(lo)), repr(float(hi)), repr(float(p)), repr(float(n))])


def distance_histograms(
    pair_set: MultiViewPairSet,
    metric: Optional[PsdMetric] = None,
    space: str = "original",
    view: int = 0,
    bins: int = 50,
) -> Histogram:
    """Histograms of squared pair distances under ``metric`` (identity when ``None``).

    ``space`` selects the original view ``view`` or the privileged features.
    Both histograms share one bin range spanning all pair distances.
    """
    if space == "original":
        diffs = pair_set.view_diffs(view)
    elif space == "privileged":
        diffs = pair_set.privileged_diffs()
    else:
        raise InputError(f"unknown space {space!r}")
    if metric is None:
        d2 = np.einsum("ij,ij->i", diffs, diffs)
    else:
        d2 = np.maximum(pairwise_mahalanobis_sq(metric.matrix, diffs), 0.0)
    lo, hi = float(d2.min()), float(d2.max())
    if hi <= lo:
        # zero spread: narrow range around the common value, which lands in one bin
        half = 0.5 * max(abs(lo), 1.0) * 1e-6
        edges = np.linspace(lo - half, lo + half, bins + 1)
    else:
        edges = np.linspace(lo, hi, bins + 1)
    pos = pair_set.labels > 0
    hp, _ = np.histogram(d2[pos], bins=edges, density=True)
    hn, _ = np.histogram(d2[~pos], bins=edges, density=True)
    return Histogram(edges, hp, hn)


def overlap_coefficient(h: Histogram) -> float:
    """Shared area of the positive and negative densities (0 = disjoint, 1 = identical)."""
    return float(np.sum(np.minimum(h.positive, h.negative) * h.widths))
