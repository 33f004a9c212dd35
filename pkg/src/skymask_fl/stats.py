"""PCA and diagonal Gaussian mixtures for clustering client representations.

Both estimators follow the scikit-learn conventions (``fit`` returns
``self``, learned state lives in trailing-underscore attributes,
``get_params``/``set_params`` come from :class:`~sklearn.base.BaseEstimator`)
so they can be dropped into pipelines or grid searches.
"""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .data import rng_for
from .exceptions import UsageError

VARIANCE_FLOOR = 1e-6


class GramPCA(TransformerMixin, BaseEstimator):
    """Principal component analysis through the ``n x n`` Gram matrix.

    Cheap when samples are few and features many, the situation for
    flattened model vectors. Each component is sign-fixed so its entry of
    largest magnitude is positive.

    Components whose eigenvalue is numerically zero (rank-deficient input)
    are returned as zero rows with zero explained variance.
    """

    def __init__(self, n_components=2, rank_tol=1e-10):
        self.n_components = n_components
        self.rank_tol = rank_tol

    def fit(self, X, y=None):
        self._fit(X)
        return self

    def fit_transform(self, X, y=None):
        Xc = self._fit(X)
        return Xc @ self.components_.T

    def _fit(self, X):
        X = check_array(X, dtype=np.float64)
        n, V = X.shape
        k = self.n_components
        if n < 2:
            raise UsageError("PCA needs at least two samples")
        if not 1 <= k <= min(n, V):
            raise UsageError(f"n_components={k} must lie in [1, min(n, V)={min(n, V)}]")
        self.mean_ = X.mean(axis=0)
        Xc = X - self.mean_
        gram = Xc @ Xc.T
        evals, evecs = np.linalg.eigh(gram)
        order = np.argsort(evals)[::-1][:k]
        evals, evecs = np.clip(evals[order], 0.0, None), evecs[:, order]
        total = float(np.trace(gram))
        cutoff = self.rank_tol * max(evals[0], 0.0)

        components = np.zeros((k, V))
        for j in range(k):
            if evals[j] > cutoff and evals[j] > 0:
                u = Xc.T @ evecs[:, j] / np.sqrt(evals[j])
                if u[np.argmax(np.abs(u))] < 0:
                    u = -u
                components[j] = u
            else:
                evals[j] = 0.0
        self.components_ = components
        self.explained_variance_ = evals / (n - 1)
        self.explained_variance_ratio_ = evals / total if total > 0 else np.zeros(k)
        self.n_features_in_ = V
        return Xc

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = check_array(X, dtype=np.float64)
        return (X - self.mean_) @ self.components_.T

    def inverse_transform(self, Y):
        check_is_fitted(self, "components_")
        return np.asarray(Y) @ self.components_ + self.mean_


def pca_fit_transform(X, k: int) -> tuple[GramPCA, np.ndarray]:
    pca = GramPCA(n_components=k)
    Y = pca.fit_transform(X)
    return pca, Y


def _kmeanspp_centres(X, K, rng):
    n = X.shape[0]
    centres = [X[rng.integers(n)]]
    for _ in range(1, K):
        d2 = np.min([np.sum((X - c) ** 2, axis=1) for c in centres], axis=0)
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centres.append(X[idx])
    return np.array(centres)


def _estimate_log_prob(X, weights, means, variances):
    # (n, K) log pi_k + log N(x | mu_k, diag var_k)
    d = X.shape[1]
    log_det = np.sum(np.log(variances), axis=1)
    mahal = np.sum((X[:, None, :] - means[None]) ** 2 / variances[None], axis=2)
    with np.errstate(divide="ignore"):
        log_w = np.log(weights)
    return log_w - 0.5 * (d * np.log(2 * np.pi) + log_det + mahal)


class DiagonalGMM(ClusterMixin, BaseEstimator):
    """Gaussian mixture with diagonal covariances fitted by EM.

    Every restart is seeded k-means++ style from its own random stream; the
    restart with the highest final log-likelihood is kept (earliest on ties).
    ``log_likelihood_trace_`` records the log-likelihood at every E-step of the
    kept restart and is non-decreasing.
    """

    def __init__(self, n_components=2, n_init=5, tol=1e-8, max_iter=500,
                 variance_floor=VARIANCE_FLOOR, relative_floor=0.0, min_component_size=1.5,
                 random_state=0):
        self.n_components = n_components
        self.relative_floor = relative_floor
        self.min_component_size = min_component_size
        self.n_init = n_init
        self.tol = tol
        self.max_iter = max_iter
        self.variance_floor = variance_floor
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        n, d = X.shape
        K = self.n_components
        if n < K:
            raise UsageError(f"need at least {K} points, got {n}")
        best = None
        for restart in range(self.n_init):
            rng = rng_for(self.random_state, "gmm", K, restart)
            result = self._em(X, _kmeanspp_centres(X, K, rng))
            result["degenerate"] = K > 1 and result["resp"].sum(axis=0).min() < self.min_component_size
            # a component resting on a single point has no variance to estimate
            if best is None or (best["degenerate"], result["ll"]) > (result["degenerate"], best["ll"]):
                best = result
        self.weights_ = best["weights"]
        self.means_ = best["means"]
        self.variances_ = best["variances"]
        self.log_likelihood_ = best["ll"]
        self.log_likelihood_trace_ = best["trace"]
        self.responsibilities_ = best["resp"]
        self.n_iter_ = len(best["trace"])
        self.converged_ = best["converged"]
        self.degenerate_ = best["degenerate"]
        self.n_features_in_ = d
        return self

    def _em(self, X, centres):
        n, d = X.shape
        K = centres.shape[0]
        floor = np.maximum(self.variance_floor, self.relative_floor * X.var(axis=0))
        weights = np.full(K, 1.0 / K)
        means = centres.copy()
        variances = np.tile(np.maximum(X.var(axis=0), floor), (K, 1))
        trace, converged = [], False
        for _ in range(self.max_iter):
            log_prob = _estimate_log_prob(X, weights, means, variances)
            log_norm = logsumexp(log_prob, axis=1)
            ll = float(log_norm.sum())
            resp = np.exp(log_prob - log_norm[:, None])
            if trace and ll - trace[-1] < self.tol:
                trace.append(ll)
                converged = True
                break
            trace.append(ll)
            nk = resp.sum(axis=0) + 10 * np.finfo(float).eps
            weights = nk / nk.sum()
            means = (resp.T @ X) / nk[:, None]
            variances = (resp.T @ X**2) / nk[:, None] - means**2
            variances = np.maximum(variances, floor)
        else:
            # max_iter reached after an M-step: score the final parameters
            log_prob = _estimate_log_prob(X, weights, means, variances)
            log_norm = logsumexp(log_prob, axis=1)
            resp = np.exp(log_prob - log_norm[:, None])
            trace.append(float(log_norm.sum()))
        return dict(weights=weights, means=means, variances=variances, ll=trace[-1],
                    trace=np.array(trace), resp=resp, converged=converged)

    def predict_proba(self, X):
        check_is_fitted(self, "means_")
        X = check_array(X, dtype=np.float64)
        log_prob = _estimate_log_prob(X, self.weights_, self.means_, self.variances_)
        return np.exp(log_prob - logsumexp(log_prob, axis=1)[:, None])

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)

    def fit_predict(self, X, y=None):
        self.fit(X)
        self.labels_ = np.argmax(self.responsibilities_, axis=1)
        return self.labels_

    def score_samples(self, X):
        check_is_fitted(self, "means_")
        X = check_array(X, dtype=np.float64)
        return logsumexp(_estimate_log_prob(X, self.weights_, self.means_, self.variances_), axis=1)

    def n_parameters(self) -> int:
        K, d = self.means_.shape
        return K * 2 * d + (K - 1)

    def bic(self, X) -> float:
        X = check_array(X, dtype=np.float64)
        return -2.0 * float(self.score_samples(X).sum()) + self.n_parameters() * np.log(X.shape[0])


def gmm_fit(Y, K: int, restarts: int = 5, seed=0) -> DiagonalGMM:
    return DiagonalGMM(n_components=K, n_init=restarts, random_state=seed).fit(Y)


def select_k_bic(Y, candidates=(1, 2), restarts: int = 5, seed=0) -> tuple[DiagonalGMM, int]:
    """Fit one mixture per candidate ``K`` and keep the lowest BIC.

    Candidates with ``K > 1`` are skipped when there are no more points than
    components, or when every restart ended with a component of fewer than
    ``min_component_size`` effective points. Ties go to the smaller ``K``.
    """
    Y = check_array(Y, dtype=np.float64)
    n = Y.shape[0]
    best, best_bic = None, np.inf
    for K in sorted(candidates):
        if K > 1 and n <= K:
            continue
        model = gmm_fit(Y, K, restarts, seed)
        score = -2.0 * model.log_likelihood_ + model.n_parameters() * np.log(n)
        if model.degenerate_:
            score = np.inf
        model.bic_ = score
        if score < best_bic:
            best, best_bic = model, score
    return best, best.n_components
