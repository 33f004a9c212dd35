"""Baseline robust aggregation rules and the PCA/GMM update detector."""

from __future__ import annotations

import logging
import warnings

import numpy as np
from sklearn.base import BaseEstimator

from .engine import AggregationResult, Aggregator, DetectionReport, fedavg, local_train
from .exceptions import UsageError
from .stats import DiagonalGMM, GramPCA

logger = logging.getLogger(__name__)


def _as_matrix(updates) -> np.ndarray:
    if len(updates) and hasattr(updates[0], "update"):
        return np.stack([u.update for u in updates])
    return np.atleast_2d(np.asarray(updates, dtype=np.float64))


def _check_nm(n: int, n_m: int):
    if n_m < 0:
        raise UsageError("n_m must be non-negative")
    if 2 * n_m >= n:
        warnings.warn(f"n_m={n_m} is not below n/2 for n={n}", stacklevel=3)


def krum_scores(updates, n_m: int) -> np.ndarray:
    """Sum of squared distances to the ``n - n_m - 2`` nearest other updates."""
    X = _as_matrix(updates)
    n = X.shape[0]
    if n < n_m + 3:
        raise UsageError(f"Krum needs n >= n_m + 3 (n={n}, n_m={n_m})")
    d2 = np.sum((X[:, None, :] - X[None, :, :]) ** 2, axis=2)
    k = n - n_m - 2
    scores = np.empty(n)
    for i in range(n):
        others = np.delete(d2[i], i)
        scores[i] = np.sort(others)[:k].sum()
    return scores


def krum_select(updates, n_m: int) -> int:
    """Index of the update with the lowest Krum score (lowest index on ties)."""
    return int(np.argmin(krum_scores(updates, n_m)))


def krum(updates, n_m: int):
    """The selected update itself (a ``ClientUpdate`` if those were given)."""
    idx = krum_select(updates, n_m)
    return updates[idx]


def trimmed_mean(updates, n_m: int) -> np.ndarray:
    """Coordinate-wise mean after dropping the ``n_m`` smallest and largest values."""
    X = _as_matrix(updates)
    n = X.shape[0]
    if n <= 2 * n_m:
        raise UsageError(f"trimmed mean needs n > 2*n_m (n={n}, n_m={n_m})")
    if n_m == 0:
        return X.mean(axis=0)
    return np.sort(X, axis=0)[n_m : n - n_m].mean(axis=0)


def fltrust(updates, root_update) -> np.ndarray:
    """Trust-weighted mean of updates rescaled to the root update's norm.

    Trust is the cosine similarity to ``root_update`` clipped at zero.
    """
    X = _as_matrix(updates)
    r = np.asarray(root_update, dtype=np.float64)
    r_norm = np.linalg.norm(r)
    if r_norm == 0:
        warnings.warn("root update is zero; FLTrust aggregate is zero", stacklevel=2)
        return np.zeros_like(r)
    norms = np.linalg.norm(X, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    trust = np.where(norms > 0, np.maximum(0.0, (X @ r) / (safe * r_norm)), 0.0)
    if trust.sum() == 0:
        return np.zeros_like(r)
    rescaled = X * (r_norm / safe)[:, None]
    return (trust @ rescaled) / trust.sum()


class TolpeginDetector(BaseEstimator):
    """Flags the smaller of two GMM clusters of PCA-projected updates.

    Coordinates are standardized across clients first; coordinates with zero
    variance are dropped. ``labels_`` is 1 for flagged clients.
    """

    def __init__(self, n_components=2, restarts=5, random_state=0):
        self.n_components = n_components
        self.restarts = restarts
        self.random_state = random_state

    def fit(self, X, y=None):
        X = _as_matrix(X)
        n = X.shape[0]
        if n < 2:
            raise UsageError("detection needs at least two updates")
        std = X.std(axis=0)
        keep = std > 1e-12 * max(1.0, float(np.abs(X).max()))
        self.labels_ = np.zeros(n, dtype=int)
        self.projection_ = np.zeros((n, self.n_components))
        if not np.any(keep):
            return self
        Z = (X[:, keep] - X[:, keep].mean(axis=0)) / std[keep]
        k = min(self.n_components, n, int(keep.sum()))
        Y = GramPCA(n_components=k).fit_transform(Z)
        self.projection_[:, :k] = Y
        if np.allclose(Y, 0.0):
            return self
        gmm = DiagonalGMM(n_components=2, n_init=self.restarts, random_state=self.random_state)
        assign = gmm.fit_predict(Y)
        sizes = np.bincount(assign, minlength=2)
        if sizes[0] != sizes[1]:
            bad = int(np.argmin(sizes))
        else:
            norms = [np.linalg.norm(Y[assign == c].mean(axis=0)) for c in range(2)]
            bad = int(np.argmax(norms))
        self.labels_ = (assign == bad).astype(int)
        return self

    def fit_predict(self, X, y=None):
        return self.fit(X).labels_


def tolpegin_detect(updates, k_pca: int = 2, seed=0) -> np.ndarray:
    """Boolean malicious verdict per update."""
    return TolpeginDetector(n_components=k_pca, random_state=seed).fit_predict(updates).astype(bool)


def assumed_nm(fed, n_m: int | None) -> int:
    """Attacker count the server assumes: given, or the truth capped below n/2."""
    n = fed.n_clients
    if n_m is None:
        n_m = int(fed.malicious.sum())
    return min(int(n_m), (n - 1) // 2)


class Krum(Aggregator):
    name = "krum"

    def __init__(self, n_m=None):
        self.n_m = n_m

    def aggregate(self, W_t, updates, fed, round_idx):
        n_m = min(assumed_nm(fed, self.n_m), len(updates) - 3)
        chosen = updates[krum_select(updates, max(n_m, 0))]
        return AggregationResult(np.asarray(W_t) - fed.fl.global_lr * chosen.update)


class TrimmedMean(Aggregator):
    name = "trim"

    def __init__(self, n_m=None):
        self.n_m = n_m

    def aggregate(self, W_t, updates, fed, round_idx):
        n_m = assumed_nm(fed, self.n_m)
        _check_nm(len(updates), n_m)
        return AggregationResult(np.asarray(W_t) - fed.fl.global_lr * trimmed_mean(updates, n_m))


class FLTrust(Aggregator):
    name = "fltrust"

    def aggregate(self, W_t, updates, fed, round_idx):
        if fed.root is None or len(fed.root) == 0:
            raise UsageError("FLTrust needs a root dataset")
        seed = fed.client_seed(-1, round_idx)
        root = local_train(W_t, fed.root, fed.layout, fed.fl, seed, client_id=-1)
        agg = fltrust(updates, root.update)
        return AggregationResult(np.asarray(W_t) - fed.fl.global_lr * agg)


class Tolpegin(Aggregator):
    name = "tolpegin"
    detects = True

    def __init__(self, k_pca=2, restarts=5):
        self.k_pca = k_pca
        self.restarts = restarts

    def aggregate(self, W_t, updates, fed, round_idx):
        det = TolpeginDetector(self.k_pca, self.restarts, random_state=fed.seed + round_idx)
        flags = det.fit_predict(updates).astype(bool)
        kept = [u for u, bad in zip(updates, flags) if not bad]
        if kept and sum(u.dataset_size for u in kept) > 0:
            W = fedavg(W_t, kept, fed.fl.global_lr)
        else:
            logger.warning("round %d: every client flagged, global model kept", round_idx)
            W = np.array(W_t, dtype=np.float64)
        report = DetectionReport(malicious=flags, truth=fed.malicious.copy(),
                                 n_clusters=2, projection=det.projection_)
        return AggregationResult(W, report)
