"""PCA fitted on training features, with an energy-retention threshold."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, InputError
from .metric import canonical_signs

__all__ = ["PcaTransform", "pca_fit", "pca_transform"]

# eigenvalues below this fraction of the largest are treated as exact zeros
_NULL_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class PcaTransform:
    mean: np.ndarray
    basis: np.ndarray
    retained_energy: float

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64)
        basis = np.array(self.basis, dtype=np.float64)
        if basis.ndim != 2 or basis.shape[0] != mean.size or basis.shape[1] > mean.size:
            raise ContractError(f"basis shape {basis.shape} inconsistent with mean of size {mean.size}")
        mean.setflags(write=False)
        basis.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "basis", basis)

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def n_components(self) -> int:
        return self.basis.shape[1]

    def inverse(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y) @ self.basis.T + self.mean


def pca_fit(features: np.ndarray, energy: float = 1.0) -> PcaTransform:
    """Fit PCA keeping the fewest components whose variance share reaches ``energy``.

    The eigenproblem is solved on the ``d x d`` scatter matrix or, when there
    are fewer samples than dimensions, on the ``n x n`` Gram matrix.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InputError("PCA needs a 2-d array with at least two samples")
    if not np.all(np.isfinite(x)):
        raise InputError("PCA input has non-finite entries")
    if not 0.0 < energy <= 1.0:
        raise InputError(f"energy must lie in (0, 1], got {energy}")
    n, d = x.shape
    mean = x.mean(axis=0)
    xc = x - mean
    if n < d:
        evals, u = np.linalg.eigh(xc @ xc.T)
        evals, u = evals[::-1], u[:, ::-1]
        keep = evals > _NULL_TOL * max(evals[0], 0.0)
        evals = evals[keep]
        vecs = (xc.T @ u[:, keep]) / np.sqrt(evals)
    else:
        evals, v = np.linalg.eigh(xc.T @ xc)
        evals, v = evals[::-1], v[:, ::-1]
        keep = evals > _NULL_TOL * max(evals[0], 0.0)
        evals, vecs = evals[keep], v[:, keep]
    if evals.size == 0:
        raise InputError("all samples are identical; PCA is undefined")
    frac = np.cumsum(evals) / np.sum(evals)
    k = int(np.searchsorted(frac, energy - 1e-12) + 1)
    k = min(k, evals.size)
    basis = canonical_signs(vecs[:, :k])
    return PcaTransform(mean, basis, float(frac[k - 1]))


def pca_transform(t: PcaTransform, x: np.ndarray) -> np.ndarray:
    """Project a vector or row-stacked matrix: ``(x - mean) @ basis``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != t.dim:
        raise ContractError(f"input dim {x.shape[-1]} does not match PCA dim {t.dim}")
    return (x - t.mean) @ t.basis
