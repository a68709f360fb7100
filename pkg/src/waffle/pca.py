"""Per-client PCA, the eigenvalue-weighted representative and client embeddings."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_finite_array, check_positive_int
from .exceptions import DataValidationError, RankDeficiencyError
from .spectral import FilterBank, build_filter_bank, embed, embedding_length

__all__ = [
    "PcaResult",
    "top_r_pca",
    "representative",
    "ClientRecord",
    "EmbeddingConfig",
    "client_embedding",
    "embed_clients",
    "ClientEmbedder",
]


@dataclass(frozen=True)
class PcaResult:
    eigvals: np.ndarray
    eigvecs: np.ndarray  # (r, d), one unit vector per row
    r: int

    @property
    def weights(self) -> np.ndarray:
        total = self.eigvals.sum()
        if not total > 0.0:
            raise RankDeficiencyError("all retained eigenvalues are zero", achievable_rank=0)
        return self.eigvals / total


def _fix_signs(vecs):
    idx = np.argmax(np.abs(vecs), axis=1)
    signs = np.sign(vecs[np.arange(len(vecs)), idx])
    signs[signs == 0] = 1.0
    return vecs * signs[:, None]


def _complete_basis(found, d, needed):
    basis = [v for v in found]
    extra = []
    for i in range(d):
        if len(extra) == needed:
            break
        e = np.zeros(d)
        e[i] = 1.0
        for _ in range(2):
            for b in basis:
                e -= (b @ e) * b
        norm = np.linalg.norm(e)
        if norm > 1e-6:
            e /= norm
            basis.append(e)
            extra.append(e)
    return np.array(extra).reshape(len(extra), d)


def _as_matrix(samples):
    X = check_finite_array(samples, "samples")
    if X.ndim < 2:
        raise DataValidationError("samples must be a sequence of images or vectors")
    return X.reshape(X.shape[0], -1)


def top_r_pca(samples, r: int, method: str = "auto") -> PcaResult:
    """Top ``r`` eigenpairs of the sample covariance of mean-centred samples.

    ``method="gram"`` eigendecomposes the n x n Gram matrix and maps the
    eigenvectors back, ``"dense"`` decomposes the d x d covariance; ``"auto"``
    takes the Gram path whenever n < d.
    """
    X = _as_matrix(samples)
    n, d = X.shape
    r = check_positive_int(r, "r")
    if n < 2:
        raise RankDeficiencyError(f"PCA needs at least 2 samples, got {n}", achievable_rank=0)
    Xc = X - X.mean(axis=0)
    max_r = min(n - 1, d)
    if r > max_r:
        raise RankDeficiencyError(f"r={r} exceeds min(n-1, d) = {max_r}; achievable r <= {max_r}",
                                  achievable_rank=max_r)
    if method == "auto":
        method = "gram" if n < d else "dense"

    if method == "gram":
        g, u = np.linalg.eigh(Xc @ Xc.T)
        order = np.argsort(g)[::-1][:r]
        g, u = np.clip(g[order], 0.0, None), u[:, order]
        tol = max(n, d) * np.finfo(float).eps * max(g[0], 0.0)
        keep = g > tol
        vecs = (Xc.T @ u[:, keep]) / np.sqrt(g[keep])
        vecs = vecs.T
        if not keep.all():
            vecs = np.vstack([vecs, _complete_basis(vecs, d, int((~keep).sum()))])
            g = np.where(keep, g, 0.0)
        eigvals = g / (n - 1)
    elif method == "dense":
        lam, v = np.linalg.eigh(Xc.T @ Xc / (n - 1))
        order = np.argsort(lam)[::-1][:r]
        eigvals = np.clip(lam[order], 0.0, None)
        vecs = v[:, order].T
        tol = max(n, d) * np.finfo(float).eps * max(eigvals[0], 0.0)
        eigvals = np.where(eigvals > tol, eigvals, 0.0)
    else:
        raise ValueError(f"unknown PCA method {method!r}")

    if not eigvals[0] > 0.0:
        raise RankDeficiencyError("samples are all identical: covariance has rank 0; achievable r = 0",
                                  achievable_rank=0)
    vecs = _fix_signs(vecs / np.linalg.norm(vecs, axis=1, keepdims=True))
    return PcaResult(eigvals=eigvals, eigvecs=vecs, r=r)


def representative(p: PcaResult) -> np.ndarray:
    """Eigenvalue-weighted sum of the principal directions (weights sum to one)."""
    return p.weights @ p.eigvecs


@dataclass(frozen=True)
class EmbeddingConfig:
    """Everything that determines a client's embedding."""

    n_components: int = 10
    representation: str = "wst"
    J: int = 3
    L: int = 6
    Q: int = 1
    relative_width: float = 0.5
    pool: int = 8
    max_order: int = 1

    def bank(self, height: int, width: int) -> FilterBank | None:
        if self.representation != "wst":
            return None
        return _cached_bank(height, width, self.J, self.L, self.Q)

    def length(self, channels: int) -> int:
        return embedding_length(self.representation, channels, self.J, self.L, self.Q, self.pool,
                                self.max_order)


@lru_cache(maxsize=16)
def _cached_bank(height, width, J, L, Q):
    return build_filter_bank(height, width, J, L, Q)


class ClientRecord:
    """One client: its samples, ground-truth role and (once computed) embedding.

    ``role`` is ``None`` for a benign client, otherwise the ``AttackSpec``
    applied to its data. It cannot be reassigned.
    """

    def __init__(self, client_id, samples, role=None, labels=None):
        samples = np.asarray(samples, dtype=np.float64)
        if samples.ndim < 3 or len(samples) == 0:
            raise DataValidationError("a client needs a non-empty stack of images")
        self.client_id = int(client_id)
        self.samples = samples
        self.labels = None if labels is None else np.asarray(labels)
        self._role = role
        self._embedding = None
        self.embed_error = None
        self.predicted_label = None

    @property
    def role(self):
        return self._role

    @property
    def is_malicious(self) -> bool:
        return self._role is not None

    @property
    def embedding(self):
        return self._embedding

    @embedding.setter
    def embedding(self, value):
        if self._embedding is not None:
            raise RuntimeError(f"client {self.client_id} already has an embedding")
        self._embedding = np.asarray(value, dtype=np.float64)

    def __repr__(self):
        role = "benign" if self._role is None else self._role.kind
        return f"ClientRecord(id={self.client_id}, n={len(self.samples)}, role={role})"


def _embed_samples(samples, config: EmbeddingConfig):
    samples = np.asarray(samples, dtype=np.float64)
    image_shape = samples.shape[1:]
    x_hat = representative(top_r_pca(samples, config.n_components)).reshape(image_shape)
    bank = config.bank(*image_shape[:2])
    return embed(x_hat, config.representation, bank, config.relative_width, config.pool, config.max_order)


def client_embedding(client: ClientRecord, config: EmbeddingConfig) -> np.ndarray:
    """PCA representative -> spectral embedding, stored on the client.

    A client whose PCA fails keeps the error message in ``embed_error`` and
    the exception propagates.
    """
    try:
        phi = _embed_samples(client.samples, config)
    except RankDeficiencyError as exc:
        client.embed_error = str(exc)
        raise
    client.embedding = phi
    return phi


def embed_clients(clients, config: EmbeddingConfig, n_jobs=None):
    """Embed every client; return the ids that could not be embedded.

    Work may fan out over ``n_jobs`` workers; results are written back in
    client order so the outcome does not depend on the worker count.
    """
    def job(samples):
        try:
            return _embed_samples(samples, config), None
        except RankDeficiencyError as exc:
            return None, str(exc)

    if n_jobs in (None, 1):
        results = [job(c.samples) for c in clients]
    else:
        results = Parallel(n_jobs=n_jobs)(delayed(job)(c.samples) for c in clients)
    failed = []
    for client, (phi, err) in zip(clients, results):
        if err is None:
            client.embedding = phi
        else:
            client.embed_error = err
            failed.append(client.client_id)
    return failed


class ClientEmbedder(TransformerMixin, BaseEstimator):
    """Turn a list of per-client sample stacks into an (n_clients, D) embedding matrix.

    This is the only computation a client runs locally; the returned rows are
    what it transmits.
    """

    def __init__(self, n_components=10, representation="wst", J=3, L=6, Q=1, relative_width=0.5, pool=8,
                 max_order=1, n_jobs=None):
        self.n_components = n_components
        self.representation = representation
        self.J = J
        self.L = L
        self.Q = Q
        self.relative_width = relative_width
        self.pool = pool
        self.max_order = max_order
        self.n_jobs = n_jobs

    def _config(self):
        return EmbeddingConfig(self.n_components, self.representation, self.J, self.L, self.Q,
                               self.relative_width, self.pool, self.max_order)

    def fit(self, X, y=None):
        first = np.asarray(X[0])
        self.image_shape_ = first.shape[1:]
        channels = 1 if first.ndim == 3 else first.shape[3]
        self.config_ = self._config()
        self.n_features_out_ = self.config_.length(channels)
        return self

    def transform(self, X):
        check_is_fitted(self, "config_")
        clients = [ClientRecord(i, samples) for i, samples in enumerate(X)]
        failed = embed_clients(clients, self.config_, self.n_jobs)
        if failed:
            raise RankDeficiencyError(f"clients {failed} could not be embedded: {clients[failed[0]].embed_error}")
        return np.stack([c.embedding for c in clients])
