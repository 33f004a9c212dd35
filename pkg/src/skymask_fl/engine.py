"""One federated round: distribute, train locally, attack, aggregate.

Updates follow the sign convention ``delta = W_t - W_local``, so aggregation
rules compute ``W_{t+1} = W_t - alpha * combine(deltas)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .data import LabeledDataset, rng_for
from .exceptions import UsageError

logger = logging.getLogger(__name__)

ROOT_CLIENT_ID = -1


@dataclass(frozen=True)
class FLParams:
    local_iters: int = 5
    lr: float = 0.05
    global_lr: float = 1.0
    batch_size: int = 32


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    weights: np.ndarray
    update: np.ndarray
    dataset_size: int

    def with_update(self, W_t: np.ndarray, update: np.ndarray) -> "ClientUpdate":
        """Same client submitting ``update`` instead, weights kept consistent."""
        update = np.asarray(update, dtype=np.float64)
        return replace(self, update=update, weights=W_t - update)


@dataclass(frozen=True)
class DetectionReport:
    """Verdicts of a detecting defense for one round.

    ``malicious`` is the per-client verdict. Rates are ``None`` when their
    denominator (benign or malicious ground-truth count) is zero.
    """

    malicious: np.ndarray
    truth: np.ndarray | None = None
    n_clusters: int = 2
    mask_iterations: int | None = None
    projection: np.ndarray | None = None
    layer_ones: dict | None = None
    loss_trace: np.ndarray | None = None

    @property
    def benign_set(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(~self.malicious)]

    @property
    def fpr(self) -> float | None:
        return detection_rates(self.malicious, self.truth)[0]

    @property
    def fnr(self) -> float | None:
        return detection_rates(self.malicious, self.truth)[1]


def detection_rates(flagged, truth) -> tuple[float | None, float | None]:
    """``(FPR, FNR)`` of ``flagged`` against ground-truth ``truth``."""
    if truth is None:
        return None, None
    flagged = np.asarray(flagged, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    n_benign, n_mal = int((~truth).sum()), int(truth.sum())
    fpr = float((flagged & ~truth).sum() / n_benign) if n_benign else None
    fnr = float((~flagged & truth).sum() / n_mal) if n_mal else None
    return fpr, fnr


def local_train(W_t, data: LabeledDataset, layout: nn.LayerLayout, params: FLParams,
                seed, client_id: int = 0) -> ClientUpdate:
    """``local_iters`` mini-batch SGD steps from ``W_t`` on ``data``.

    Mini-batches walk through a fresh permutation of the data, reshuffling
    once it is exhausted. A batch size at least the dataset size gives
    full-batch gradient descent.
    """
    W_t = np.asarray(W_t, dtype=np.float64)
    if params.local_iters < 1:
        raise UsageError("local_iters must be >= 1")
    n = len(data)
    if n == 0:
        return ClientUpdate(client_id, W_t.copy(), np.zeros_like(W_t), 0)
    rng = rng_for(seed, "local_train")
    bs = min(params.batch_size, n)
    W = W_t.copy()
    order, pos = rng.permutation(n), 0
    for _ in range(params.local_iters):
        if pos + bs > n:
            order, pos = rng.permutation(n), 0
        idx = order[pos : pos + bs]
        pos += bs
        _, grad = nn.loss_and_grad(W, layout, data.X[idx], data.y[idx])
        W = nn.sgd_step(W, grad, params.lr)
    return ClientUpdate(client_id, W, W_t - W, n)


def fedavg(W_t, updates: list[ClientUpdate], alpha: float = 1.0) -> np.ndarray:
    """Dataset-size weighted average of the updates, applied with step ``alpha``."""
    if not updates:
        raise UsageError("fedavg needs at least one update")
    sizes = np.array([u.dataset_size for u in updates], dtype=np.float64)
    if sizes.sum() <= 0:
        raise UsageError("all client dataset sizes are zero")
    weights = sizes / sizes.sum()
    deltas = np.stack([u.update for u in updates])
    return np.asarray(W_t, dtype=np.float64) - alpha * (weights @ deltas)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class RoundState:
    """Global model entering round ``t`` and what the previous round produced."""

    t: int
    W: np.ndarray
    updates: tuple[ClientUpdate, ...] = ()
    malicious: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def __post_init__(self):
        object.__setattr__(self, "W", _frozen(self.W))


@dataclass
class Federation:
    """Everything fixed across rounds: model layout, client data, adversaries."""

    layout: nn.LayerLayout
    clients: list[LabeledDataset]
    malicious: np.ndarray
    root: LabeledDataset | None
    fl: FLParams
    seed: int = 0

    def __post_init__(self):
        self.malicious = np.asarray(self.malicious, dtype=bool)
        if self.malicious.shape != (len(self.clients),):
            raise UsageError("malicious flags must have one entry per client")

    @property
    def n_clients(self) -> int:
        return len(self.clients)

    @property
    def malicious_ids(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.malicious)]

    def client_seed(self, client_id: int, round_idx: int) -> int:
        return int(rng_for(self.seed, "client_seed", client_id + 2, round_idx).integers(2**31))

    def train(self, client_id: int, W_t, data: LabeledDataset, round_idx: int) -> ClientUpdate:
        seed = self.client_seed(client_id, round_idx)
        return local_train(W_t, data, self.layout, self.fl, seed, client_id)


def malicious_flags(n: int, fraction: float) -> np.ndarray:
    """The first ``ceil(fraction * n)`` clients are adversarial."""
    if not 0.0 <= fraction < 1.0:
        raise UsageError(f"malicious fraction must lie in [0, 1), got {fraction}")
    # round first so that e.g. 0.2 * 20 does not become ceil(4.000000000000001)
    k = math.ceil(round(fraction * n, 9))
    flags = np.zeros(n, dtype=bool)
    flags[:k] = True
    return flags


@dataclass(frozen=True)
class AggregationResult:
    W: np.ndarray
    report: DetectionReport | None = None


class Aggregator:
    """Server-side rule turning submitted updates into the next global model."""

    name = "base"
    detects = False

    def aggregate(self, W_t, updates: list[ClientUpdate], fed: Federation,
                  round_idx: int) -> AggregationResult:
        raise NotImplementedError


class FedAvg(Aggregator):
    name = "fedavg"

    def aggregate(self, W_t, updates, fed, round_idx):
        return AggregationResult(fedavg(W_t, updates, fed.fl.global_lr))


def run_round(state: RoundState, fed: Federation, defense: Aggregator,
              attack=None) -> tuple[RoundState, DetectionReport | None]:
    """Play one communication round with full client participation.

    Every client first trains honestly. The attack then replaces the updates
    of the adversarial clients, with access to all honest updates. Updates
    reach the defense in client-id order.
    """
    from .attacks import AttackContext

    t, W_t = state.t, state.W
    honest = [fed.train(i, W_t, data, t) for i, data in enumerate(fed.clients)]
    submitted = list(honest)
    mal_ids = fed.malicious_ids
    if attack is not None and mal_ids:
        ctx = AttackContext(
            honest=np.stack([u.update for u in honest]),
            malicious=mal_ids,
            W_t=np.asarray(W_t),
            round_idx=t,
            fed=fed,
            seed=fed.seed,
        )
        crafted = attack.craft(ctx)
        for row, i in enumerate(mal_ids):
            submitted[i] = honest[i].with_update(W_t, crafted[row])
    result = defense.aggregate(W_t, submitted, fed, t)
    report = result.report
    if report is not None and report.truth is None:
        report = replace(report, truth=fed.malicious.copy())
    new_state = RoundState(t + 1, result.W, tuple(submitted), fed.malicious.copy())
    return new_state, report
