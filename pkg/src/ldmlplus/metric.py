"""Symmetric-matrix numerics: Mahalanobis distances, PSD-cone projection, embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, InputError

__all__ = [
    "PsdMetric",
    "symmetrize",
    "psd_project",
    "mahalanobis_sq",
    "pairwise_mahalanobis_sq",
    "embed",
    "identity_metric",
    "canonical_signs",
]

# clamp window for tiny negative quadratic forms caused by round-off
_NEG_CLAMP = 1e-12


def symmetrize(a: np.ndarray) -> np.ndarray:
    """Return ``(a + a.T) / 2`` as a new float64 array."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ContractError(f"expected a square matrix, got shape {a.shape}")
    return 0.5 * (a + a.T)


def canonical_signs(vectors: np.ndarray, rel_tol: float = 1e-12) -> np.ndarray:
    """Flip columns so the first non-negligible component of each is positive."""
    vectors = np.array(vectors, dtype=np.float64, copy=True)
    for k in range(vectors.shape[1]):
        col = vectors[:, k]
        scale = np.max(np.abs(col)) if col.size else 0.0
        if scale == 0.0:
            continue
        nz = np.flatnonzero(np.abs(col) > rel_tol * scale)
        if col[nz[0]] < 0:
            vectors[:, k] = -col
    return vectors


@dataclass(frozen=True, eq=False)
class PsdMetric:
    """A symmetric positive-semidefinite matrix together with a low-rank factor.

    ``matrix == factor @ factor.T`` up to round-off. Instances are treated as
    immutable; the arrays are flagged read-only on construction.

    Attributes
    ----------
    matrix : ndarray, shape (dim, dim)
    factor : ndarray, shape (dim, rank)
        Columns are eigenvectors scaled by the square roots of the retained
        (positive) eigenvalues, in descending eigenvalue order.
    """

    matrix: np.ndarray
    factor: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        f = np.asarray(self.factor, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ContractError(f"metric matrix must be square, got {m.shape}")
        if f.ndim != 2 or f.shape[0] != m.shape[0]:
            raise ContractError(
                f"factor shape {f.shape} does not match matrix dim {m.shape[0]}"
            )
        m = m.copy()
        f = f.copy()
        m.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "factor", f)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def rank(self) -> int:
        return self.factor.shape[1]

    @classmethod
    def from_factor(cls, factor: np.ndarray) -> "PsdMetric":
        factor = np.asarray(factor, dtype=np.float64)
        return cls(symmetrize(factor @ factor.T), factor)

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.matrix)[0])

    def reconstruction_error(self) -> float:
        """Frobenius norm of ``factor @ factor.T - matrix``."""
        return float(np.linalg.norm(self.factor @ self.factor.T - self.matrix))

    def __eq__(self, other):
        if not isinstance(other, PsdMetric):
            return NotImplemented
        return np.array_equal(self.matrix, other.matrix) and np.array_equal(
            self.factor, other.factor
        )

    __hash__ = None


def identity_metric(dim: int) -> PsdMetric:
    if dim < 1:
        raise ContractError("metric dimension must be >= 1")
    eye = np.eye(dim)
    return PsdMetric(eye, eye)


def psd_project(a: np.ndarray) -> PsdMetric:
    """Project a symmetric matrix onto the PSD cone by eigenvalue truncation.

    The input is symmetrized first. Eigenpairs with eigenvalue at or below
    ``1e-12 * max(1, |lambda_max|)`` are dropped, the rest are kept in
    descending order with a deterministic sign convention.

    Raises
    ------
    InputError
        If ``a`` contains NaN or infinite entries.
    """
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise InputError("cannot project a matrix with non-finite entries")
    a = symmetrize(a)
    evals, evecs = np.linalg.eigh(a)
    evals = evals[::-1]
    evecs = evecs[:, ::-1]
    tau = 1e-12 * max(1.0, float(np.max(np.abs(evals))))
    keep = evals > tau
    vecs = canonical_signs(evecs[:, keep])
    factor = vecs * np.sqrt(evals[keep])
    return PsdMetric(symmetrize(factor @ factor.T), factor)


def _check_vec(metric: PsdMetric, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != metric.dim:
        raise ContractError(
            f"vector length {x.shape[-1]} does not match metric dim {metric.dim}"
        )
    return x


def mahalanobis_sq(metric: PsdMetric, diff: np.ndarray) -> float:
    """Squared Mahalanobis length ``diff^T M diff`` of a difference vector."""
    diff = _check_vec(metric, diff)
    if diff.ndim != 1:
        raise ContractError("mahalanobis_sq expects a single vector")
    val = float(diff @ metric.matrix @ diff)
    if val < 0.0:
        if val < -_NEG_CLAMP * (1.0 + float(diff @ diff)):
            raise ContractError(f"negative quadratic form {val}; metric not PSD")
        val = 0.0
    return val


def pairwise_mahalanobis_sq(matrix: np.ndarray, diffs: np.ndarray) -> np.ndarray:
    """Row-wise ``d_i^T M d_i`` for a stack of difference vectors.

    Accepts a raw (possibly non-symmetric) matrix so that finite-difference
    checks can perturb single entries.
    """
    matrix = np.asarray(getattr(matrix, "matrix", matrix), dtype=np.float64)
    diffs = np.asarray(diffs, dtype=np.float64)
    if diffs.shape[1] != matrix.shape[0]:
        raise ContractError(
            f"difference dim {diffs.shape[1]} does not match metric dim {matrix.shape[0]}"
        )
    return np.einsum("ij,ij->i", diffs @ matrix, diffs)


def embed(metric: PsdMetric, x: np.ndarray) -> np.ndarray:
    """Map ``x`` (vector or row-stacked matrix) through the factor: ``x @ U``.

    Squared Euclidean distances between embeddings equal squared Mahalanobis
    distances under ``metric``.
    """
    x = _check_vec(metric, x)
    return x @ metric.factor
