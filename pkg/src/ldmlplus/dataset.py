"""Labeled training pairs over multi-view features, pair weights and scale parameters."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import ContractError, DegeneratePrivilegedError, InputError

__all__ = [
    "FeatureView",
    "LabeledPair",
    "PairPolicy",
    "PairIndex",
    "MultiViewPairSet",
    "ScaleParams",
    "build_pairs",
    "compute_betas",
    "mean_pair_sq_distance",
]


@dataclass(frozen=True, eq=False)
class FeatureView:
    """One feature representation of every sample, ``features[i]`` for sample ``i``."""

    name: str
    features: np.ndarray

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64, copy=True)
        if x.ndim != 2 or x.shape[1] < 1:
            raise InputError(f"view {self.name!r}: features must be a 2-d array with dim >= 1")
        if not np.all(np.isfinite(x)):
            raise InputError(f"view {self.name!r}: non-finite feature values")
        x.setflags(write=False)
        object.__setattr__(self, "features", x)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class LabeledPair:
    index_a: int
    index_b: int
    label: int
    weight: float


@dataclass(frozen=True)
class PairPolicy:
    """How to turn identity labels into training pairs.

    mode
        ``"exhaustive"`` keeps every negative pair, ``"subsample"`` draws at most
        ``neg_ratio * n_positive`` (and at most ``max_negatives``) negatives
        uniformly without replacement using ``seed``.
    cross_camera
        When camera ids are supplied, only pairs whose samples come from
        different cameras are formed.
    """

    mode: str = "exhaustive"
    neg_ratio: float = 10.0
    max_negatives: Optional[int] = None
    seed: int = 0
    cross_camera: bool = True

    def __post_init__(self):
        if self.mode not in ("exhaustive", "subsample"):
            raise InputError(f"unknown pair policy mode {self.mode!r}")
        if self.neg_ratio <= 0:
            raise InputError("neg_ratio must be positive")


@dataclass(frozen=True, eq=False)
class PairIndex:
    """Array-backed list of labeled pairs; iterating yields :class:`LabeledPair`."""

    index_a: np.ndarray
    index_b: np.ndarray
    labels: np.ndarray
    weights: np.ndarray = field(default=None)

    def __post_init__(self):
        a = np.asarray(self.index_a, dtype=np.int64)
        b = np.asarray(self.index_b, dtype=np.int64)
        y = np.asarray(self.labels, dtype=np.float64)
        if not (a.shape == b.shape == y.shape) or a.ndim != 1:
            raise ContractError("pair index arrays must be 1-d and equally long")
        if np.any(a == b):
            raise InputError("a pair cannot join a sample with itself")
        if not np.all((y == 1.0) | (y == -1.0)):
            raise InputError("pair labels must be +1 or -1")
        n_pos = int(np.sum(y > 0))
        n_neg = y.size - n_pos
        if n_pos < 1:
            raise InputError("no similar (positive) pair available")
        if n_neg < 1:
            raise InputError("no dissimilar (negative) pair available")
        w = np.where(y > 0, 1.0 / n_pos, 1.0 / n_neg)
        for arr in (a, b, y, w):
            arr.setflags(write=False)
        object.__setattr__(self, "index_a", a)
        object.__setattr__(self, "index_b", b)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return self.labels.size

    def __iter__(self) -> Iterator[LabeledPair]:
        for a, b, y, w in zip(self.index_a, self.index_b, self.labels, self.weights):
            yield LabeledPair(int(a), int(b), int(y), float(w))

    @property
    def n_similar(self) -> int:
        return int(np.sum(self.labels > 0))

    @property
    def n_dissimilar(self) -> int:
        return int(np.sum(self.labels < 0))


def build_pairs(
    identity_labels: Sequence[int],
    policy: PairPolicy = PairPolicy(),
    cameras: Optional[Sequence[int]] = None,
) -> PairIndex:
    """Form similar/dissimilar pairs from per-sample identity labels.

    Every same-identity pair ``(i, j), i < j`` becomes a positive pair (restricted
    to cross-camera pairs when ``cameras`` is given and the policy asks for
    it). Negatives are all remaining pairs, optionally subsampled. Output order
    is lexicographic in ``(i, j)`` and fully determined by the inputs.
    """
    ids = np.asarray(identity_labels)
    if ids.ndim != 1:
        raise InputError("identity labels must be a 1-d sequence")
    if np.unique(ids).size < 2:
        raise InputError("at least two distinct identities are required")
    ia, ib = np.triu_indices(ids.size, k=1)
    if cameras is not None and policy.cross_camera:
        cams = np.asarray(cameras)
        if cams.shape != ids.shape:
            raise ContractError("cameras and identity labels differ in length")
        keep = cams[ia] != cams[ib]
        ia, ib = ia[keep], ib[keep]
    same = ids[ia] == ids[ib]
    pos = np.flatnonzero(same)
    neg = np.flatnonzero(~same)
    if pos.size == 0:
        raise InputError("no similar (positive) pair can be formed")
    if neg.size == 0:
        raise InputError("no dissimilar (negative) pair can be formed")
    if policy.mode == "subsample":
        n_keep = min(neg.size, int(policy.neg_ratio * pos.size))
        if policy.max_negatives is not None:
            n_keep = min(n_keep, policy.max_negatives)
        n_keep = max(n_keep, 1)
        rng = np.random.default_rng(policy.seed)
        neg = np.sort(rng.choice(neg, size=n_keep, replace=False))
    sel = np.sort(np.concatenate([pos, neg]))
    labels = np.where(same[sel], 1.0, -1.0)
    return PairIndex(ia[sel], ib[sel], labels)


@dataclass(frozen=True, eq=False)
class MultiViewPairSet:
    """Training pairs with per-view and privileged difference vectors.

    ``privileged`` may be ``None`` for the global-threshold baseline.
    Difference vectors ``x_a - x_b`` are materialized once at construction.
    """

    views: tuple
    privileged: Optional[FeatureView]
    pairs: PairIndex

    def __post_init__(self):
        views = tuple(self.views)
        if not views:
            raise InputError("at least one original view is required")
        n = views[0].n_samples
        for v in views[1:] + ((self.privileged,) if self.privileged is not None else ()):
            if v.n_samples != n:
                raise ContractError(
                    f"view {v.name!r} has {v.n_samples} samples, expected {n}"
                )
        top = max(int(self.pairs.index_a.max()), int(self.pairs.index_b.max()))
        if top >= n:
            raise ContractError(f"pair references sample {top} but only {n} samples exist")
        object.__setattr__(self, "views", views)
        a, b = self.pairs.index_a, self.pairs.index_b
        diffs = tuple(_ro(v.features[a] - v.features[b]) for v in views)
        object.__setattr__(self, "_view_diffs", diffs)
        pd = None
        if self.privileged is not None:
            pd = _ro(self.privileged.features[a] - self.privileged.features[b])
        object.__setattr__(self, "_priv_diffs", pd)

    @classmethod
    def from_diffs(cls, view_diffs, privileged_diffs, labels) -> "MultiViewPairSet":
        """Build a pair set directly from difference vectors.

        Pair ``i`` is realized as samples ``2i`` (holding the difference) and
        ``2i + 1`` (holding zeros), so the stored differences are exact.
        """
        labels = np.asarray(labels, dtype=np.float64)
        n = labels.size

        def interleave(d, name):
            d = np.asarray(d, dtype=np.float64)
            if d.shape[0] != n:
                raise ContractError(f"{name}: expected {n} difference rows")
            x = np.zeros((2 * n, d.shape[1]))
            x[0::2] = d
            return FeatureView(name, x)

        views = tuple(interleave(d, f"view{m}") for m, d in enumerate(view_diffs))
        priv = None if privileged_diffs is None else interleave(privileged_diffs, "privileged")
        pairs = PairIndex(np.arange(0, 2 * n, 2), np.arange(1, 2 * n, 2), labels)
        return cls(views, priv, pairs)

    @property
    def n_views(self) -> int:
        return len(self.views)

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)

    @property
    def n_similar(self) -> int:
        return self.pairs.n_similar

    @property
    def n_dissimilar(self) -> int:
        return self.pairs.n_dissimilar

    @property
    def labels(self) -> np.ndarray:
        return self.pairs.labels

    @property
    def weights(self) -> np.ndarray:
        return self.pairs.weights

    def view_diffs(self, m: int) -> np.ndarray:
        return self._view_diffs[m]

    def privileged_diffs(self) -> np.ndarray:
        if self._priv_diffs is None:
            raise InputError("pair set has no privileged view")
        return self._priv_diffs

    def view_dims(self) -> list:
        return [v.dim for v in self.views]

    def single_view(self, m: int) -> "MultiViewPairSet":
        return MultiViewPairSet((self.views[m],), self.privileged, self.pairs)

    def with_privileged(self, privileged: Optional[FeatureView]) -> "MultiViewPairSet":
        return MultiViewPairSet(self.views, privileged, self.pairs)


def _ro(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ScaleParams:
    """Per-view scale factors applied to the privileged distance."""

    betas: tuple

    def __post_init__(self):
        betas = tuple(float(b) for b in self.betas)
        if not betas or not all(np.isfinite(b) and b > 0 for b in betas):
            raise InputError(f"scale parameters must be positive and finite: {betas}")
        object.__setattr__(self, "betas", betas)

    def __len__(self) -> int:
        return len(self.betas)

    def __getitem__(self, m: int) -> float:
        return self.betas[m]


def _mean_all_pairs_sq(x: np.ndarray) -> float:
    # mean over all (i, j) of ||x_i - x_j||^2 = 2 (mean ||x_i||^2 - ||mean x||^2)
    mu = x.mean(axis=0)
    return float(2.0 * (np.mean(np.einsum("ij,ij->i", x, x)) - mu @ mu))


def mean_pair_sq_distance(pair_set: MultiViewPairSet, view: int = 0) -> float:
    """Average squared Euclidean distance over the training pairs of one view."""
    d = pair_set.view_diffs(view)
    return float(np.mean(np.einsum("ij,ij->i", d, d)))


def compute_betas(pair_set: MultiViewPairSet, over: str = "pairs") -> ScaleParams:
    """Scale parameters ``beta_m = mean(D_view_m) / mean(D_privileged)``.

    Parameters
    ----------
    over : {"pairs", "all"}
        Average squared Euclidean distances over the training pairs, or over
        all sample pairs of the feature matrices.

    Raises
    ------
    DegeneratePrivilegedError
        If the privileged mean squared distance is zero.
    """
    if over == "pairs":
        dp = pair_set.privileged_diffs()
        priv = float(np.mean(np.einsum("ij,ij->i", dp, dp)))
        orig = [mean_pair_sq_distance(pair_set, m) for m in range(pair_set.n_views)]
    elif over == "all":
        if pair_set.privileged is None:
            raise InputError("pair set has no privileged view")
        priv = _mean_all_pairs_sq(pair_set.privileged.features)
        orig = [_mean_all_pairs_sq(v.features) for v in pair_set.views]
    else:
        raise InputError(f"unknown averaging domain {over!r}")
    if not priv > 0.0:
        raise DegeneratePrivilegedError(
            "privileged features are identical across all pairs; beta is undefined"
        )
    return ScaleParams(tuple(o / priv for o in orig))
