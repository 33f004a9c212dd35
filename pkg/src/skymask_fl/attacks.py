"""Model-poisoning attacks run by the adversarial clients.

Every attack exposes ``craft(ctx)`` returning one update row per malicious
client (in ``ctx.malicious`` order). Attackers know all honest updates of
the round and the data of the clients they control.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset, TriggerSpec, embed_trigger, rng_for
from .defenses import krum_select
from .exceptions import UsageError

PERTURBATIONS = ("inverse-std", "inverse-unit", "inverse-sign")


@dataclass
class AttackContext:
    honest: np.ndarray
    malicious: list[int]
    W_t: np.ndarray
    round_idx: int = 0
    fed: object = None
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.honest = np.asarray(self.honest, dtype=np.float64)
        if len(set(self.malicious)) != len(self.malicious):
            raise UsageError("malicious client ids must be distinct")

    @property
    def n_malicious(self) -> int:
        return len(self.malicious)

    def rng(self, tag: str) -> np.random.Generator:
        return rng_for(self.seed, tag, self.round_idx)


def label_flip(ds: LabeledDataset, mode: str = "complement") -> LabeledDataset:
    """Relabel ``y -> C-1-y`` (``complement``) or ``y -> (y+1) mod C`` (``next``)."""
    C = ds.n_classes
    if C < 2:
        raise UsageError("label flipping needs at least two classes")
    if mode == "complement":
        y = C - 1 - ds.y
    elif mode == "next":
        y = (ds.y + 1) % C
    else:
        raise UsageError(f"unknown label flip mode {mode!r}")
    return LabeledDataset(ds.X, y, C, ds.ids)


def fang_trim(ctx: AttackContext) -> np.ndarray:
    """Directed deviation against coordinate-wise statistics.

    Each coordinate is pushed 3 to 4 standard deviations away from the honest
    mean, on the side opposite to the honest direction.
    """
    if ctx.honest.shape[0] < 2:
        raise UsageError("fang_trim needs at least two honest updates")
    mu = ctx.honest.mean(axis=0)
    sigma = ctx.honest.std(axis=0)
    u = ctx.rng("fang_trim").uniform(3.0, 4.0, size=(ctx.n_malicious, mu.size))
    direction = np.where(np.sign(mu) < 0, 1.0, -1.0)
    return mu + direction * u * sigma


def fang_krum_search(ctx: AttackContext, lam_init: float = 10.0, halving_steps: int = 20,
                     noise: float = 1e-4):
    """Largest ``lambda`` (by halving) for which Krum picks a crafted update.

    Returns ``(updates, lam, feasible)``. Crafted updates are
    ``-lam * sign(mean honest update)`` plus small per-client noise, i.e.
    weights moved against the honest direction.
    """
    honest = ctx.honest
    n, V = honest.shape
    mal = list(ctx.malicious)
    n_m = len(mal)
    s = np.sign(honest.mean(axis=0))
    jitter = ctx.rng("fang_krum").uniform(-noise, noise, size=(n_m, V))
    lam = float(lam_init)
    crafted = None
    for _ in range(halving_steps + 1):
        crafted = -lam * s + jitter
        population = honest.copy()
        population[mal] = crafted
        if n >= n_m + 3 and krum_select(population, n_m) in mal:
            return crafted, lam, True
        lam /= 2.0
    return crafted, lam * 2.0, False


def fang_krum(ctx: AttackContext, lam_init: float = 10.0, halving_steps: int = 20) -> np.ndarray:
    return fang_krum_search(ctx, lam_init, halving_steps)[0]


def perturbation(honest: np.ndarray, kind: str = "inverse-std") -> np.ndarray:
    mu = honest.mean(axis=0)
    if kind == "inverse-std":
        return -honest.std(axis=0)
    if kind == "inverse-unit":
        norm = np.linalg.norm(mu)
        return -mu / norm if norm > 0 else np.zeros_like(mu)
    if kind == "inverse-sign":
        return -np.sign(mu)
    raise UsageError(f"unknown perturbation {kind!r}, expected one of {PERTURBATIONS}")


def _pairwise_sq(A: np.ndarray) -> np.ndarray:
    sq = np.sum(A**2, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * A @ A.T
    np.fill_diagonal(d2, 0.0)
    return np.maximum(d2, 0.0)


def agr_constraint(honest: np.ndarray, mode: str):
    """Return ``(score(candidate), bound)`` for the AGR-agnostic feasibility test.

    A candidate is feasible when ``score(candidate) <= bound``.
    """
    d2 = _pairwise_sq(honest)
    if mode == "min-max":
        bound = float(np.sqrt(d2.max()))

        def score(m):
            return float(np.sqrt(np.max(np.sum((honest - m) ** 2, axis=1))))

    elif mode == "min-sum":
        bound = float(d2.sum(axis=1).max())

        def score(m):
            return float(np.sum((honest - m) ** 2))

    else:
        raise UsageError(f"unknown AGR-agnostic mode {mode!r}")
    return score, bound


def agr_agnostic_search(ctx: AttackContext, mode: str = "min-max", gamma_init: float = 10.0,
                        tol: float = 1e-3, direction: str = "inverse-std", max_iter: int = 50):
    """``mu + gamma * p`` with the largest feasible ``gamma`` found by bisection.

    The feasible set in ``gamma >= 0`` is an interval starting at 0 because the
    score is convex in ``gamma`` and feasible at ``gamma = 0``. The bracket is
    grown from ``gamma_init`` if needed, then bisected to width ``tol``.
    Returns ``(update, gamma)``.
    """
    honest = ctx.honest
    if honest.shape[0] < 2:
        raise UsageError("agr_agnostic needs at least two honest updates")
    mu = honest.mean(axis=0)
    p = perturbation(honest, direction)
    score, bound = agr_constraint(honest, mode)
    if bound == 0.0 or not np.any(p):
        return mu.copy(), 0.0

    def feasible(g):
        return score(mu + g * p) <= bound

    lo, hi = 0.0, float(gamma_init)
    for _ in range(max_iter):
        if not feasible(hi):
            break
        lo, hi = hi, 2.0 * hi
    for _ in range(max_iter):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            lo = mid
        else:
            hi = mid
    return mu + lo * p, lo


def agr_agnostic(ctx: AttackContext, mode: str = "min-max", gamma_init: float = 10.0,
                 tol: float = 1e-3, direction: str = "inverse-std") -> np.ndarray:
    m, _ = agr_agnostic_search(ctx, mode, gamma_init, tol, direction)
    return np.tile(m, (ctx.n_malicious, 1))


def _poisoned_training_set(ds: LabeledDataset, trig: TriggerSpec, fraction: float,
                           seed) -> LabeledDataset:
    """Clean data plus triggered copies of a ``fraction`` subset of it."""
    k = math.ceil(fraction * len(ds))
    if k == 0:
        return ds
    chosen = rng_for(seed, "poison_subset").choice(len(ds), size=k, replace=False)
    extra = embed_trigger(ds.subset(np.sort(chosen)), trig, 1.0)
    return LabeledDataset(
        np.vstack([ds.X, extra.X]),
        np.concatenate([ds.y, extra.y]),
        ds.n_classes,
        np.concatenate([ds.ids, extra.ids]),
    )


def scaling_backdoor(ctx: AttackContext, trig: TriggerSpec, poison_fraction: float = 0.5,
                     scale: float | None = None, triggers=None) -> np.ndarray:
    """Train on backdoored data and submit the update multiplied by ``scale``.

    ``scale`` defaults to ``n / n_m``. ``triggers`` optionally gives one
    trigger per malicious client (distributed backdoor).
    """
    fed = ctx.fed
    n = ctx.honest.shape[0]
    scale = n / ctx.n_malicious if scale is None else scale
    if scale <= 0:
        raise UsageError("scale must be positive")
    out = []
    for j, cid in enumerate(ctx.malicious):
        t = trig if triggers is None else triggers[j]
        seed = int(rng_for(ctx.seed, "poison", cid + 2, ctx.round_idx).integers(2**31))
        data = _poisoned_training_set(fed.clients[cid], t, poison_fraction, seed)
        upd = fed.train(cid, ctx.W_t, data, ctx.round_idx)
        out.append(scale * upd.update)
    return np.stack(out)


def dba_assign(trig: TriggerSpec, n_m: int) -> list[TriggerSpec]:
    """Split trigger coordinates round-robin into ``n_m`` local triggers."""
    if n_m < 1 or n_m > len(trig.indices):
        raise UsageError(f"cannot split {len(trig.indices)} trigger indices across {n_m} clients")
    return [TriggerSpec(trig.indices[j::n_m], trig.value, trig.target) for j in range(n_m)]


class Attack:
    name = "none"
    targeted = False

    def craft(self, ctx: AttackContext) -> np.ndarray:
        return ctx.honest[ctx.malicious]


class NoAttack(Attack):
    pass


class LabelFlipAttack(Attack):
    name = "lf"

    def __init__(self, mode="complement"):
        self.mode = mode

    def craft(self, ctx):
        fed = ctx.fed
        return np.stack([
            fed.train(cid, ctx.W_t, label_flip(fed.clients[cid], self.mode), ctx.round_idx).update
            for cid in ctx.malicious
        ])


class FangTrimAttack(Attack):
    name = "fang-trim"

    def craft(self, ctx):
        return fang_trim(ctx)


class FangKrumAttack(Attack):
    name = "fang-krum"

    def __init__(self, lam_init=10.0, halving_steps=20):
        self.lam_init = lam_init
        self.halving_steps = halving_steps

    def craft(self, ctx):
        return fang_krum(ctx, self.lam_init, self.halving_steps)


class AgrAgnosticAttack(Attack):
    def __init__(self, mode="min-max", gamma_init=10.0, tol=1e-3, direction="inverse-std"):
        self.mode = mode
        self.name = mode
        self.gamma_init = gamma_init
        self.tol = tol
        self.direction = direction

    def craft(self, ctx):
        return agr_agnostic(ctx, self.mode, self.gamma_init, self.tol, self.direction)


class ScalingAttack(Attack):
    name = "scaling"
    targeted = True

    def __init__(self, trigger=TriggerSpec(), poison_fraction=0.5, scale=None):
        self.trigger = trigger
        self.poison_fraction = poison_fraction
        self.scale = scale

    def craft(self, ctx):
        return scaling_backdoor(ctx, self.trigger, self.poison_fraction, self.scale)


class DBAAttack(ScalingAttack):
    name = "dba"

    def craft(self, ctx):
        n_sub = min(ctx.n_malicious, len(self.trigger.indices))
        parts = dba_assign(self.trigger, n_sub)
        triggers = [parts[j % n_sub] for j in range(ctx.n_malicious)]
        return scaling_backdoor(ctx, self.trigger, self.poison_fraction, self.scale, triggers)


ATTACKS = ("none", "lf", "fang-trim", "fang-krum", "min-max", "min-sum", "scaling", "dba")
