"""Server-side aggregation rules over flat parameter vectors.

All rules take a sequence of equally sized 1-D updates. Where a rule has to
break ties it prefers the lowest update index.
"""

from __future__ import annotations

import math
import warnings

import numpy as np

from .exceptions import NotConvergedWarning

__all__ = [
    "aggregate_fedavg",
    "krum_scores",
    "aggregate_krum",
    "aggregate_mkrum",
    "geometric_median",
    "aggregate_geomed",
    "aggregate_trimmed_mean",
    "aggregate",
    "AGGREGATORS",
]


def _stack(updates):
    if len(updates) == 0:
        raise ValueError("no updates to aggregate")
    dims = {np.shape(u) for u in updates}
    if len(dims) != 1:
        raise ValueError(f"updates have mismatched shapes: {sorted(dims)}")
    U = np.asarray(updates, dtype=np.float64)
    if U.ndim != 2:
        raise ValueError("updates must be flat vectors")
    return U


def aggregate_fedavg(updates, weights=None) -> np.ndarray:
    """Mean of the updates, weighted by ``weights`` (e.g. sample counts) if given."""
    U = _stack(updates)
    if weights is None:
        return U.mean(axis=0)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(U),) or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be non-negative, one per update, with a positive sum")
    return (w / w.sum()) @ U


def krum_scores(updates, f: int) -> np.ndarray:
    """Sum of squared distances from each update to its n - f - 2 nearest others."""
    U = _stack(updates)
    n = len(U)
    if f < 0:
        raise ValueError("f must be non-negative")
    m = n - f - 2
    if m < 1:
        raise ValueError(f"Krum needs n >= f + 3 updates, got n={n}, f={f}")
    sq = np.sum(U * U, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * U @ U.T, 0.0)
    np.fill_diagonal(d2, np.inf)
    return np.sort(d2, axis=1)[:, :m].sum(axis=1)


def _ranked(scores):
    return np.lexsort((np.arange(len(scores)), scores))


def aggregate_krum(updates, f: int) -> np.ndarray:
    """The single update with the lowest Krum score."""
    U = _stack(updates)
    return U[_ranked(krum_scores(U, f))[0]].copy()


def aggregate_mkrum(updates, f: int, k: int = 5) -> np.ndarray:
    """Average of the ``k`` updates with the lowest Krum scores."""
    U = _stack(updates)
    if not 1 <= k <= len(U):
        raise ValueError(f"k must lie in [1, {len(U)}], got {k}")
    return U[_ranked(krum_scores(U, f))[:k]].mean(axis=0)


def _objective(y, U):
    return float(np.linalg.norm(U - y, axis=1).sum())


def geometric_median(updates, tol: float = 1e-8, maxit: int = 1000):
    """Weiszfeld iteration with the Vardi-Zhang correction at data points.

    Returns ``(median, converged, n_iter)``. The result never has a larger
    objective than the best input point.
    """
    U = _stack(updates)
    # a data point is the exact median when the unit pulls of the others sum to norm <= its multiplicity;
    # Weiszfeld only crawls towards such a point, so test for it up front
    for k, u in enumerate(U):
        dist = np.linalg.norm(U - u, axis=1)
        away = dist >= 1e-12
        pull = ((U[away] - u) / dist[away, None]).sum(axis=0)
        if np.linalg.norm(pull) <= (~away).sum():
            return u.copy(), True, 0
    y = U.mean(axis=0)
    converged = False
    it = 0
    for it in range(1, maxit + 1):
        diff = U - y
        dist = np.linalg.norm(diff, axis=1)
        at_point = dist < 1e-12
        inv = np.where(at_point, 0.0, 1.0 / np.where(at_point, 1.0, dist))
        if inv.sum() == 0.0:
            converged = True
            break
        T = (inv @ U) / inv.sum()
        if at_point.any():
            R = inv @ diff
            r = np.linalg.norm(R)
            eta = float(at_point.sum())
            if r <= eta:
                converged = True
                break
            y_new = (1.0 - eta / r) * T + (eta / r) * y
        else:
            y_new = T
        step = np.linalg.norm(y_new - y)
        y = y_new
        if step < tol:
            converged = True
            break
    obj = _objective(y, U)
    point_obj = [_objective(u, U) for u in U]
    best = int(np.argmin(point_obj))
    if point_obj[best] < obj:
        y = U[best].copy()
    return y, converged, it


def aggregate_geomed(updates, tol: float = 1e-8, maxit: int = 1000) -> np.ndarray:
    """Geometric median of the updates; warns if ``maxit`` is exhausted."""
    y, converged, _ = geometric_median(updates, tol, maxit)
    if not converged:
        warnings.warn(f"Weiszfeld did not reach tol={tol} in {maxit} iterations", NotConvergedWarning)
    return y


def aggregate_trimmed_mean(updates, trim: float = 0.2) -> np.ndarray:
    """Per-coordinate mean after dropping floor(n * trim) values from each tail."""
    if not 0.0 <= trim < 0.5:
        raise ValueError(f"trim must lie in [0, 0.5), got {trim}")
    U = _stack(updates)
    n = len(U)
    cut = int(math.floor(n * trim))
    if n - 2 * cut < 1:
        raise ValueError(f"trimming {cut} from each tail of {n} updates leaves nothing")
    return np.sort(U, axis=0)[cut:n - cut].mean(axis=0)


AGGREGATORS = ("fedavg", "krum", "mkrum", "geomed", "trimmed_mean")


def aggregate(name: str, updates, weights=None, f=None, k=5, trim=0.2, tol=1e-8, maxit=1000) -> np.ndarray:
    """Dispatch by name. For the Krum family ``f`` defaults to ceil(0.4 n),
    clipped to n - 3; with fewer than three updates Krum degrades to the mean."""
    n = len(updates)
    if name == "fedavg":
        return aggregate_fedavg(updates, weights)
    if name in ("krum", "mkrum"):
        f = math.ceil(0.4 * n) if f is None else f
        if n < 3:
            return aggregate_fedavg(updates)
        f = min(f, n - 3)
        if name == "krum":
            return aggregate_krum(updates, f)
        return aggregate_mkrum(updates, f, min(k, n))
    if name == "geomed":
        return aggregate_geomed(updates, tol, maxit)
    if name == "trimmed_mean":
        return aggregate_trimmed_mean(updates, trim)
    raise ValueError(f"unknown aggregator {name!r}; choose from {AGGREGATORS}")
