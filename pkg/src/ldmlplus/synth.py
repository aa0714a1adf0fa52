"""Seeded synthetic re-identification data.

Every identity owns a Gaussian latent vector. Each original view observes a
fixed random linear projection of the latent plus per-sample Gaussian noise;
the privileged view does the same with (typically) less noise, or is pure
noise in ``random`` mode. Identities are split half/half into train and test.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .errors import ConfigError

__all__ = ["ViewSpec", "PrivilegedSpec", "SynthConfig", "Split", "SynthData", "generate",
           "complementary_config"]


@dataclass(frozen=True)
class ViewSpec:
    """One observed view.

    ``corrupt`` lists latent coordinates that receive extra per-sample noise of
    scale ``corrupt_sigma`` before projection, so the view is unreliable there.
    """

    dim: int
    noise_sigma: float
    projection_seed: int
    corrupt: Tuple[int, ...] = ()
    corrupt_sigma: float = 0.0


@dataclass(frozen=True)
class PrivilegedSpec:
    dim: int = 15
    noise_sigma: float = 0.25
    random: bool = False
    projection_seed: int = 999


@dataclass(frozen=True)
class SynthConfig:
    n_ids: int = 100
    samples_per_id_per_cam: int = 2
    n_cams: int = 2
    latent_dim: int = 10
    views: Tuple[ViewSpec, ...] = (ViewSpec(30, 1.0, 1), ViewSpec(40, 1.0, 2))
    privileged: PrivilegedSpec = field(default_factory=PrivilegedSpec)
    seed: int = 0
    difficulty_spread: float = 0.0

    def __post_init__(self):
        if self.n_ids < 4:
            raise ConfigError("n_ids must be at least 4 (two per split)")
        if self.samples_per_id_per_cam < 1 or self.latent_dim < 1:
            raise ConfigError("samples_per_id_per_cam and latent_dim must be positive")
        if self.n_cams < 2:
            raise ConfigError("n_cams must be at least 2")
        if not self.views:
            raise ConfigError("at least one view spec is required")
        for v in self.views:
            if v.dim < 1 or v.noise_sigma < 0 or v.corrupt_sigma < 0:
                raise ConfigError(f"invalid view spec {v}")
            if any(not 0 <= k < self.latent_dim for k in v.corrupt):
                raise ConfigError(f"corrupted latent index out of range in {v}")
        if self.privileged.dim < 1 or self.privileged.noise_sigma < 0:
            raise ConfigError("invalid privileged spec")


@dataclass(frozen=True, eq=False)
class Split:
    """Samples of one identity-disjoint split; ``privileged`` is absent for test."""

    ids: np.ndarray
    cams: np.ndarray
    views: tuple
    privileged: Optional[np.ndarray] = None

    @property
    def n_samples(self) -> int:
        return self.ids.size

    def probe_gallery(self):
        """Index arrays: probes from the lowest camera id, gallery from the others."""
        first = self.cams.min()
        return np.flatnonzero(self.cams == first), np.flatnonzero(self.cams != first)


@dataclass(frozen=True, eq=False)
class SynthData:
    train: Split
    test: Split
    config: SynthConfig


def _projection(seed: int, dim: int, latent_dim: int) -> np.ndarray:
    """Random isometric embedding of the latent space, scaled to unit signal variance.

    When ``dim < latent_dim`` the map is a scaled random orthogonal projection.
    """
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((max(dim, latent_dim), min(dim, latent_dim)))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))
    if dim < latent_dim:
        q = q.T
    return q * np.sqrt(dim / latent_dim)


def generate(config: SynthConfig = SynthConfig()) -> SynthData:
    """Generate a train/test split; bitwise reproducible for a given config."""
    rng = np.random.default_rng(config.seed)
    n_ids, n_cams, spc = config.n_ids, config.n_cams, config.samples_per_id_per_cam
    latents = rng.standard_normal((n_ids, config.latent_dim))
    ids = np.repeat(np.arange(n_ids), n_cams * spc)
    cams = np.tile(np.repeat(np.arange(n_cams), spc), n_ids)
    z = latents[ids]
    n = ids.size
    # per-sample noise multiplier shared by every view (image quality)
    quality = np.exp(config.difficulty_spread * rng.standard_normal(n))[:, None]

    views = []
    for spec in config.views:
        a = _projection(spec.projection_seed, spec.dim, config.latent_dim)
        zv = z.copy()
        if spec.corrupt:
            cols = list(spec.corrupt)
            zv[:, cols] += spec.corrupt_sigma * rng.standard_normal((n, len(cols)))
        views.append(zv @ a.T + quality * spec.noise_sigma * rng.standard_normal((n, spec.dim)))

    ps = config.privileged
    if ps.random:
        priv = rng.standard_normal((n, ps.dim))
    else:
        a = _projection(ps.projection_seed, ps.dim, config.latent_dim)
        priv = z @ a.T + quality * ps.noise_sigma * rng.standard_normal((n, ps.dim))

    perm = rng.permutation(n_ids)
    train_ids = np.sort(perm[: n_ids // 2])
    tr = np.isin(ids, train_ids)
    te = ~tr
    train = Split(ids[tr], cams[tr], tuple(v[tr] for v in views), priv[tr])
    test = Split(ids[te], cams[te], tuple(v[te] for v in views), None)
    return SynthData(train, test, config)


def complementary_config(seed: int = 0, noise_sigma: float = 1.0, corrupt_sigma: float = 3.0,
                         latent_dim: int = 12, dims: Tuple[int, ...] = (30, 30, 30)) -> SynthConfig:
    """Three views, each with a different third of the latent space corrupted."""
    third = latent_dim // 3
    views = tuple(
        ViewSpec(d, noise_sigma, 11 + m, tuple(range(m * third, (m + 1) * third)), corrupt_sigma)
        for m, d in enumerate(dims)
    )
    return SynthConfig(latent_dim=latent_dim, views=views,
                       privileged=PrivilegedSpec(15, noise_sigma / 4), seed=seed)
