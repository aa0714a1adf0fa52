"""On-disk formats: feature tables (CSV / PMLF binary) and the PMLM model container.

Feature CSV
    One row per sample, no header: ``identity, camera, f_1, ..., f_d``.
    Identity and camera are integers; features are decimal reals.

PMLF binary (little-endian)
    ``b"PMLF"``, ``u32 n_samples``, ``u32 dim``, then ``n_samples`` rows of
    ``dim + 2`` f64 values: identity, camera, then the ``dim`` features.

PMLM model container (little-endian)
    ``b"PMLM"``, ``u32 version``, then a sequence of typed records written by
    :func:`save_model`; see that function for the exact layout.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .dataset import ScaleParams
from .errors import InputError
from .metric import PsdMetric
from .objective import ViewWeights
from .preprocess import PcaTransform

__all__ = [
    "FeatureTable",
    "read_features",
    "write_features_csv",
    "write_features_binary",
    "save_model",
    "load_model",
    "model_summary",
    "export_model_json",
    "MODEL_FORMAT_VERSION",
]

FEATURE_MAGIC = b"PMLF"
MODEL_MAGIC = b"PMLM"
MODEL_FORMAT_VERSION = 1
_MODES = ("ldml", "ldml+", "mvldml+")


@dataclass(frozen=True, eq=False)
class FeatureTable:
    ids: np.ndarray
    cams: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        n = self.features.shape[0]
        if self.ids.shape != (n,) or self.cams.shape != (n,):
            raise InputError("ids and cams must have one entry per feature row")

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.features.shape[0]


def _as_int_column(col: np.ndarray, what: str, path) -> np.ndarray:
    if not np.all(np.isfinite(col)) or not np.all(col == np.round(col)):
        raise InputError(f"{path}: {what} column must hold integers")
    return col.astype(np.int64)


def _table_from_matrix(raw: np.ndarray, path) -> FeatureTable:
    if raw.ndim != 2 or raw.shape[1] < 3:
        raise InputError(f"{path}: need identity, camera and at least one feature column")
    feats = np.ascontiguousarray(raw[:, 2:], dtype=np.float64)
    if not np.all(np.isfinite(feats)):
        raise InputError(f"{path}: non-finite feature values")
    return FeatureTable(
        _as_int_column(raw[:, 0], "identity", path),
        _as_int_column(raw[:, 1], "camera", path),
        feats,
    )


def read_features(path) -> FeatureTable:
    """Read a feature table, detecting PMLF binary by its magic bytes."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"feature file not found: {path}")
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == FEATURE_MAGIC:
        return _read_binary(path)
    try:
        raw = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    except ValueError as exc:
        raise InputError(f"{path}: cannot parse CSV features ({exc})") from exc
    if raw.size == 0:
        raise InputError(f"{path}: empty feature file")
    return _table_from_matrix(raw, path)


def _read_binary(path) -> FeatureTable:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise InputError(f"{path}: truncated PMLF header")
    n, dim = struct.unpack_from("<II", data, 4)
    expected = 12 + 8 * n * (dim + 2)
    if len(data) != expected:
        raise InputError(f"{path}: expected {expected} bytes for {n}x{dim} table, found {len(data)}")
    raw = np.frombuffer(data, dtype="<f8", offset=12).reshape(n, dim + 2)
    return _table_from_matrix(raw.astype(np.float64), path)


def write_features_csv(path, ids, cams, features) -> None:
    features = np.asarray(features, dtype=np.float64)
    with open(path, "w") as fh:
        for i, c, row in zip(ids, cams, features):
            fh.write(f"{int(i)},{int(c)}," + ",".join(repr(float(v)) for v in row) + "\n")


def write_features_binary(path, ids, cams, features) -> None:
    features = np.asarray(features, dtype=np.float64)
    n, dim = features.shape
    rows = np.empty((n, dim + 2), dtype="<f8")
    rows[:, 0] = ids
    rows[:, 1] = cams
    rows[:, 2:] = features
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<II", n, dim))
        fh.write(rows.tobytes())


class _Writer:
    def __init__(self):
        self.buf = io.BytesIO()

    def u32(self, v: int):
        self.buf.write(struct.pack("<I", int(v)))

    def f64(self, v: float):
        self.buf.write(struct.pack("<d", float(v)))

    def array(self, a: np.ndarray):
        self.buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())

    def metric(self, m: Optional[PsdMetric]):
        if m is None:
            self.u32(0)
            self.u32(0)
            return
        self.u32(m.dim)
        self.u32(m.rank)
        self.array(m.matrix)
        self.array(m.factor)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def _take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise InputError(f"{self.path}: truncated model file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self._take(8))[0]

    def array(self, *shape) -> np.ndarray:
        count = int(np.prod(shape))
        return np.frombuffer(self._take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)

    def metric(self) -> Optional[PsdMetric]:
        dim, rank = self.u32(), self.u32()
        if dim == 0:
            return None
        return PsdMetric(self.array(dim, dim), self.array(dim, rank))


def save_model(model, path) -> None:
    """Write ``model`` to a PMLM container.

    Layout after the magic and version: ``u32 mode`` (index into ldml, ldml+,
    mvldml+), ``u32 n_views``, per view a metric record (``u32 dim, u32 rank,
    f64 matrix[dim*dim], f64 factor[dim*rank]``), the privileged metric record
    (dim 0 when absent), ``f64 weights[n_views]``, ``u32 has_betas`` then
    ``f64 betas[n_views]``, ``f64 sigma`` (NaN when absent), per view a PCA
    record (``u32 present``; if present ``u32 d, u32 k, f64 energy,
    f64 mean[d], f64 basis[d*k]``), ``u32 n_history, f64 history[...]`` and
    ``u32 converged``.
    """
    w = _Writer()
    w.buf.write(MODEL_MAGIC)
    w.u32(MODEL_FORMAT_VERSION)
    w.u32(_MODES.index(model.mode))
    w.u32(model.n_views)
    for m in model.metrics:
        w.metric(m)
    w.metric(model.privileged_metric)
    w.array(np.asarray(model.view_weights.weights))
    if model.betas is None:
        w.u32(0)
    else:
        w.u32(1)
        w.array(np.asarray(model.betas.betas))
    w.f64(np.nan if model.sigma is None else model.sigma)
    pcas = model.pca or [None] * model.n_views
    for t in pcas:
        if t is None:
            w.u32(0)
            continue
        w.u32(1)
        w.u32(t.dim)
        w.u32(t.n_components)
        w.f64(t.retained_energy)
        w.array(t.mean)
        w.array(t.basis)
    w.u32(len(model.history))
    w.array(np.asarray(model.history))
    w.u32(int(model.converged))
    Path(path).write_bytes(w.buf.getvalue())


def load_model(path):
    from .optimizer import ModelMVLDML

    path = Path(path)
    if not path.exists():
        raise InputError(f"model file not found: {path}")
    r = _Reader(path.read_bytes(), path)
    if r._take(4) != MODEL_MAGIC:
        raise InputError(f"{path}: not a PMLM model file")
    version = r.u32()
    if version != MODEL_FORMAT_VERSION:
        raise InputError(f"{path}: unsupported model format version {version}")
    mode = _MODES[r.u32()]
    n_views = r.u32()
    metrics = [r.metric() for _ in range(n_views)]
    priv = r.metric()
    weights = ViewWeights(tuple(r.array(n_views)))
    betas = ScaleParams(tuple(r.array(n_views))) if r.u32() else None
    sigma = r.f64()
    pcas = []
    for _ in range(n_views):
        if not r.u32():
            pcas.append(None)
            continue
        d, k = r.u32(), r.u32()
        energy = r.f64()
        mean = r.array(d)
        basis = r.array(d, k)
        pcas.append(PcaTransform(mean, basis, energy))
    history = list(r.array(r.u32()))
    converged = bool(r.u32())
    return ModelMVLDML(
        mode=mode,
        metrics=metrics,
        privileged_metric=priv,
        view_weights=weights,
        betas=betas,
        history=[float(h) for h in history],
        converged=converged,
        sigma=None if np.isnan(sigma) else sigma,
        pca=pcas if any(t is not None for t in pcas) else [],
    )


def model_summary(model) -> dict:
    """JSON-friendly view of the scalar parts of a model."""
    return {
        "mode": model.mode,
        "format_version": MODEL_FORMAT_VERSION,
        "view_dims": [m.dim for m in model.metrics],
        "view_ranks": [m.rank for m in model.metrics],
        "privileged_dim": None if model.privileged_metric is None else model.privileged_metric.dim,
        "privileged_rank": None if model.privileged_metric is None else model.privileged_metric.rank,
        "view_weights": list(model.view_weights.weights),
        "betas": None if model.betas is None else list(model.betas.betas),
        "sigma": model.sigma,
        "history": [float(h) for h in model.history],
        "iterations": model.n_iters,
        "converged": model.converged,
    }


def export_model_json(model, path) -> None:
    with open(path, "w") as fh:
        json.dump(model_summary(model), fh, indent=2)
