"""Learnable-mask detection of poisoned client models.

The server freezes the submitted models, gives each one a real-valued mask
of the same size and trains only the masks so that the element-wise
sigmoid-weighted average of the models fits a small clean root dataset.
Masks of poisoned models are driven down where their parameters hurt the
root loss. The binarized masks are projected with PCA and clustered with a
Gaussian mixture; one cluster means no attack, otherwise the cluster holding
the trusted root model's mask (or the larger cluster, without a root model)
is kept and averaged.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, ClusterMixin

from . import nn
from .data import LabeledDataset
from .engine import (
    ROOT_CLIENT_ID,
    AggregationResult,
    Aggregator,
    ClientUpdate,
    DetectionReport,
    FLParams,
    fedavg,
    local_train,
)
from .exceptions import NumericError, UsageError
from .stats import GramPCA, select_k_bic

logger = logging.getLogger(__name__)

VARIANTS = ("skymask", "skymask-nr")


@dataclass
class MaskSet:
    """Real-valued masks, one row per model, and how training went."""

    masks: np.ndarray
    iterations: int = 0
    loss_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))
    converged: bool = False

    @property
    def sigmoid(self) -> np.ndarray:
        return expit(self.masks)


@dataclass(frozen=True)
class MaskedAggregate:
    sig: np.ndarray
    numer: np.ndarray
    denom: np.ndarray
    W: np.ndarray


def _check_models(models) -> np.ndarray:
    models = np.asarray(models, dtype=np.float64)
    if models.ndim != 2:
        raise UsageError(f"models must be a (count, V) matrix, got shape {models.shape}")
    return models


def init_masks(models) -> MaskSet:
    """All-ones masks: every model starts with the same weight sigma(1)."""
    models = _check_models(models)
    if models.shape[0] < 2:
        raise UsageError("mask training needs at least two models")
    return MaskSet(np.ones_like(models))


def masked_aggregate(models, masks) -> MaskedAggregate:
    """Element-wise average of the models weighted by ``sigmoid(masks)``."""
    models = _check_models(models)
    masks = np.asarray(getattr(masks, "masks", masks), dtype=np.float64)
    if masks.shape != models.shape:
        raise UsageError(f"mask shape {masks.shape} does not match models {models.shape}")
    sig = expit(masks)
    numer = np.sum(sig * models, axis=0)
    denom = np.sum(sig, axis=0)
    return MaskedAggregate(sig, numer, denom, numer / denom)


def mask_gradient(models, masks, grad_W, agg: MaskedAggregate | None = None) -> np.ndarray:
    """Chain rule from the loss gradient w.r.t. the aggregate to every mask.

    d W~[k] / d m_i[k] = sigma'(m_i[k]) * (W_i[k] - W~[k]) / S[k]
    """
    models = _check_models(models)
    if agg is None:
        agg = masked_aggregate(models, masks)
    sig = agg.sig
    return np.asarray(grad_W)[None, :] * sig * (1.0 - sig) * (models - agg.W[None, :]) / agg.denom[None, :]


def mask_loss(models, masks, layout: nn.LayerLayout, X, y) -> float:
    """Summed root cross-entropy of the aggregate, the mask training objective."""
    return len(y) * nn.loss_and_grad(masked_aggregate(models, masks).W, layout, X, y)[0]


def train_masks(models, layout: nn.LayerLayout, root: LabeledDataset, lr: float = 5.0,
                max_iters: int = 300, tol: float = 1e-6, patience: int = 3,
                normalize: bool = False) -> MaskSet:
    """Full-batch gradient descent on the masks; the models stay frozen.

    The objective is the summed (not averaged) cross-entropy over the root
    set. Stops once the root loss changed by less than ``tol`` for ``patience``
    consecutive iterations, or after ``max_iters`` updates.

    With ``normalize`` the step size is ``lr / max|g_0|`` for the whole run,
    where ``g_0`` is the first mask gradient, so that ``lr`` bounds the first
    change of any mask entry whatever the scale of the client updates.
    """
    models = _check_models(models)
    if lr < 0:
        raise UsageError("mask learning rate must be non-negative")
    state = init_masks(models)
    masks = state.masks
    trace, quiet, converged, it = [], 0, False, 0
    while True:
        agg = masked_aggregate(models, masks)
        try:
            loss, grad_W = nn.loss_and_grad(agg.W, layout, root.X, root.y)
            loss, grad_W = loss * len(root), grad_W * len(root)
        except NumericError as exc:
            raise NumericError(
                f"mask training diverged at iteration {it} ({exc}); try a smaller mask lr",
                layer=exc.layer,
            ) from exc
        if trace and abs(loss - trace[-1]) < tol:
            quiet += 1
        else:
            quiet = 0
        trace.append(loss)
        if quiet >= patience:
            converged = True
            break
        if it >= max_iters:
            break
        g = mask_gradient(models, masks, grad_W, agg)
        if it == 0 and normalize:
            peak = float(np.max(np.abs(g)))
            lr = lr / peak if peak > 0 else 0.0
        masks = masks - lr * g
        if not np.all(np.isfinite(masks)):
            raise NumericError(f"non-finite masks at iteration {it}; try a smaller mask lr")
        it += 1
    return MaskSet(masks, it, np.array(trace), converged)


def binarize(masks, tau: float = 0.5) -> np.ndarray:
    """1 where ``sigmoid(mask) > tau``, else 0."""
    if not 0.0 < tau < 1.0:
        raise UsageError(f"threshold must lie in (0, 1), got {tau}")
    masks = np.asarray(getattr(masks, "masks", masks), dtype=np.float64)
    return (expit(masks) > tau).astype(np.uint8)


def layer_ones_fraction(binary: np.ndarray, layout: nn.LayerLayout) -> np.ndarray:
    """``(models, blocks)`` fraction of ones per weight/bias block."""
    return np.stack([binary[:, sl].mean(axis=1) for _, sl in layout.layer_slices()], axis=1)


def train_root_model(W_t, root: LabeledDataset, layout: nn.LayerLayout, fl: FLParams,
                     seed) -> np.ndarray:
    """Trusted model: local training from ``W_t`` on the root dataset."""
    return local_train(W_t, root, layout, fl, seed, client_id=ROOT_CLIENT_ID).weights


def aggregate_benign(W_t, updates: list[ClientUpdate], benign, alpha: float = 1.0) -> np.ndarray:
    """Dataset-size weighted FedAvg over the clients in ``benign``.

    An empty (or zero-weight) benign set skips the round.
    """
    keep = set(int(i) for i in benign)
    kept = [u for u in updates if u.client_id in keep]
    if not kept or sum(u.dataset_size for u in kept) == 0:
        logger.warning("no benign clients left; global model kept for this round")
        return np.array(W_t, dtype=np.float64)
    return fedavg(W_t, kept, alpha)


class SkyMaskDetector(ClusterMixin, BaseEstimator):
    """Detect poisoned models by clustering trained binary masks.

    ``fit(X, root=..., W_t=...)`` takes client model weights as rows of ``X``.
    The ``skymask`` variant trains a trusted root model from ``W_t`` and keeps
    the cluster of its mask; ``skymask-nr`` keeps the larger cluster (the one
    containing client 0 on ties). ``labels_`` is 1 for flagged clients.
    """

    def __init__(self, layout=None, variant="skymask", tau=0.5, mask_lr=0.2, max_iters=300,
                 tol=1e-6, pca_dims=3, restarts=25, local_iters=5, lr=0.05, batch_size=32,
                 random_state=0, normalize_lr=True):
        self.layout = layout
        self.variant = variant
        self.tau = tau
        self.mask_lr = mask_lr
        self.normalize_lr = normalize_lr
        self.max_iters = max_iters
        self.tol = tol
        self.pca_dims = pca_dims
        self.restarts = restarts
        self.local_iters = local_iters
        self.lr = lr
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y=None, *, root: LabeledDataset, W_t=None, root_model=None):
        if self.variant not in VARIANTS:
            raise UsageError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.layout is None:
            raise UsageError("SkyMaskDetector needs a layout")
        models = _check_models(X)
        n = models.shape[0]
        if n < 2:
            raise UsageError("detection needs at least two client models")
        if root is None or len(root) == 0:
            raise UsageError("a non-empty root dataset is required")

        self.root_model_ = None
        if self.variant == "skymask":
            if root_model is None:
                if W_t is None:
                    raise UsageError("the skymask variant needs W_t to train the root model")
                fl = FLParams(self.local_iters, self.lr, 1.0, self.batch_size)
                root_model = train_root_model(W_t, root, self.layout, fl, self.random_state)
            self.root_model_ = np.asarray(root_model, dtype=np.float64)
            models = np.vstack([models, self.root_model_])

        self.masks_ = train_masks(models, self.layout, root, self.mask_lr, self.max_iters, self.tol,
                                  normalize=self.normalize_lr)
        self.binary_masks_ = binarize(self.masks_, self.tau)
        k = min(self.pca_dims, models.shape[0], models.shape[1])
        self.projection_ = GramPCA(n_components=k).fit_transform(self.binary_masks_)

        if np.allclose(self.projection_, 0.0):
            self.gmm_, self.n_clusters_ = None, 1
        else:
            self.gmm_, self.n_clusters_ = select_k_bic(
                self.projection_, (1, 2), self.restarts, self.random_state
            )
        if self.n_clusters_ == 1:
            assign = np.zeros(models.shape[0], dtype=int)
            benign_label = 0
        else:
            assign = np.argmax(self.gmm_.responsibilities_, axis=1)
            if self.variant == "skymask":
                benign_label = assign[n]
            else:
                sizes = np.bincount(assign[:n], minlength=2)
                benign_label = assign[0] if sizes[0] == sizes[1] else int(np.argmax(sizes))
                if sizes[0] == sizes[1]:
                    logger.info("equal cluster sizes; keeping the cluster of client 0")
        self.cluster_labels_ = assign
        self.labels_ = (assign[:n] != benign_label).astype(int)
        return self

    def fit_predict(self, X, y=None, **fit_params):
        return self.fit(X, y, **fit_params).labels_


@dataclass
class SkyMaskParams:
    variant: str = "skymask"
    tau: float = 0.5
    mask_lr: float = 0.2
    max_iters: int = 300
    tol: float = 1e-6
    pca_dims: int = 3
    restarts: int = 25
    normalize_lr: bool = True


def detect(client_models, W_t, root: LabeledDataset, layout: nn.LayerLayout,
           params: SkyMaskParams = SkyMaskParams(), fl: FLParams = FLParams(), seed=0,
           truth=None) -> DetectionReport:
    """Run the full mask pipeline on one round's client models."""
    det = SkyMaskDetector(layout, params.variant, params.tau, params.mask_lr, params.max_iters,
                          params.tol, params.pca_dims, params.restarts, fl.local_iters, fl.lr,
                          fl.batch_size, seed, params.normalize_lr)
    det.fit(client_models, root=root, W_t=W_t)
    return _report(det, layout, truth)


def _report(det: SkyMaskDetector, layout, truth) -> DetectionReport:
    return DetectionReport(
        malicious=det.labels_.astype(bool),
        truth=None if truth is None else np.asarray(truth, dtype=bool),
        n_clusters=det.n_clusters_,
        mask_iterations=det.masks_.iterations,
        projection=det.projection_,
        layer_ones=layer_ones_fraction(det.binary_masks_, layout),
        loss_trace=det.masks_.loss_trace,
    )


class SkyMask(Aggregator):
    """Mask-based detection followed by FedAvg over the kept clients."""

    detects = True

    def __init__(self, params: SkyMaskParams = SkyMaskParams()):
        self.params = params
        self.name = params.variant

    def aggregate(self, W_t, updates, fed, round_idx):
        p, fl = self.params, fed.fl
        det = SkyMaskDetector(fed.layout, p.variant, p.tau, p.mask_lr, p.max_iters, p.tol,
                              p.pca_dims, p.restarts, fl.local_iters, fl.lr, fl.batch_size,
                              fed.client_seed(ROOT_CLIENT_ID, round_idx), p.normalize_lr)
        det.fit(np.stack([u.weights for u in updates]), root=fed.root, W_t=W_t)
        report = _report(det, fed.layout, fed.malicious.copy())
        W = aggregate_benign(W_t, updates, report.benign_set, fl.global_lr)
        return AggregationResult(W, report)
