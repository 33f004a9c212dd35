"""Synthetic datasets, non-IID client partitioning, root sets and triggers."""

from __future__ import annotations

import math
import warnings
import zlib
from dataclasses import dataclass, field

import numpy as np

from .exceptions import UsageError


def rng_for(seed, tag: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``(seed, tag, *extra)``.

    Every operation owns its stream so results do not depend on call order.
    """
    entropy = [int(seed) & 0xFFFFFFFF, zlib.crc32(tag.encode()), *(int(e) for e in extra)]
    return np.random.default_rng(np.random.SeedSequence(entropy))


@dataclass(frozen=True)
class LabeledDataset:
    """Feature matrix, labels and stable per-sample ids."""

    X: np.ndarray
    y: np.ndarray
    n_classes: int
    ids: np.ndarray = field(default=None)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise UsageError(f"inconsistent dataset shapes X={X.shape} y={y.shape}")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise UsageError(f"labels must lie in [0, {self.n_classes})")
        ids = np.arange(len(y)) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        if ids.shape != y.shape:
            raise UsageError("ids must have one entry per sample")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "ids", ids)

    def __len__(self):
        return len(self.y)

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.intp)
        return LabeledDataset(self.X[idx], self.y[idx], self.n_classes, self.ids[idx])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.n_classes)

    def to_csv(self, path):
        header = ",".join([f"d{j}" for j in range(self.n_features)] + ["label"])
        data = np.column_stack([self.X, self.y])
        fmt = ["%.17g"] * self.n_features + ["%d"]
        np.savetxt(path, data, delimiter=",", header=header, comments="", fmt=fmt)

    @classmethod
    def from_csv(cls, path, n_classes: int | None = None) -> "LabeledDataset":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        y = data[:, -1].astype(np.int64)
        C = int(y.max()) + 1 if n_classes is None else n_classes
        return cls(data[:, :-1], y, C)


@dataclass(frozen=True)
class PartitionSpec:
    n_clients: int
    bias: float = 0.5
    seed: int = 0


@dataclass(frozen=True)
class TriggerSpec:
    """Coordinates overwritten with ``value``; poisoned samples get ``target``."""

    indices: tuple[int, ...] = (0, 1)
    value: float = 4.0
    target: int = 0

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if len(set(idx)) != len(idx) or any(i < 0 for i in idx):
            raise UsageError(f"trigger indices must be distinct and non-negative: {idx}")
        object.__setattr__(self, "indices", idx)

    def validate(self, n_features: int, n_classes: int):
        if any(i >= n_features for i in self.indices):
            raise UsageError(f"trigger index out of range for {n_features} features")
        if not 0 <= self.target < n_classes:
            raise UsageError(f"trigger target {self.target} out of range")


def class_means(C: int, D: int) -> np.ndarray:
    """Cluster centres with unit distance between every pair.

    Centres sit on the last ``C`` coordinate axes (scaled by 1/sqrt(2)), which
    keeps the leading coordinates free for backdoor triggers.
    """
    means = np.zeros((C, D))
    if D >= C:
        for c in range(C):
            means[c, D - 1 - c] = 1.0 / math.sqrt(2.0)
    else:
        warnings.warn(f"D={D} < C={C}: class centres placed on a line", stacklevel=3)
        means[:, D - 1] = np.arange(C, dtype=np.float64)
    return means


def gen_synthetic(C: int, D: int, N: int, spread: float, seed) -> LabeledDataset:
    """Stratified Gaussian blobs, shuffled; class ``c`` gets ``N // C`` (+1) samples."""
    if N < C:
        raise UsageError(f"need at least one sample per class (N={N}, C={C})")
    if spread <= 0:
        raise UsageError("spread must be positive")
    rng = rng_for(seed, "gen_synthetic")
    means = class_means(C, D)
    counts = np.full(C, N // C)
    counts[: N % C] += 1
    y = np.repeat(np.arange(C), counts)
    X = means[y] + spread * rng.standard_normal((N, D))
    perm = rng.permutation(N)
    return LabeledDataset(X[perm], y[perm], C)


def split(ds: LabeledDataset, sizes, seed) -> list[LabeledDataset]:
    """Disjoint random parts of the given sizes."""
    if sum(sizes) > len(ds):
        raise UsageError(f"cannot split {len(ds)} samples into {list(sizes)}")
    perm = rng_for(seed, "split").permutation(len(ds))
    parts, start = [], 0
    for s in sizes:
        parts.append(ds.subset(np.sort(perm[start : start + s])))
        start += s
    return parts


def client_groups(n_clients: int, C: int) -> np.ndarray:
    return np.arange(n_clients) % C


def partition_noniid(ds: LabeledDataset, spec: PartitionSpec) -> list[LabeledDataset]:
    """Split ``ds`` across clients with label bias ``spec.bias``.

    Client ``i`` belongs to group ``i mod C``. A sample of class ``y`` goes to a
    uniformly chosen client of group ``y`` with probability ``bias`` and to a
    uniformly chosen client outside that group otherwise.
    """
    n, C = spec.n_clients, ds.n_classes
    if n < 1:
        raise UsageError("need at least one client")
    if not 0.0 <= spec.bias <= 1.0:
        raise UsageError(f"bias must lie in [0, 1], got {spec.bias}")
    if n < C:
        warnings.warn(f"{n} clients < {C} classes: some groups are empty", stacklevel=2)
    rng = rng_for(spec.seed, "partition_noniid")
    groups = client_groups(n, C)
    members = [np.flatnonzero(groups == g) for g in range(C)]
    others = [np.flatnonzero(groups != g) for g in range(C)]
    everyone = np.arange(n)

    owner = np.empty(len(ds), dtype=np.intp)
    for k, label in enumerate(ds.y):
        own, rest = members[label], others[label]
        if own.size == 0:
            pool = everyone
        elif rest.size == 0 or rng.random() < spec.bias:
            pool = own
        else:
            pool = rest
        owner[k] = pool[rng.integers(pool.size)]
    return [ds.subset(np.flatnonzero(owner == i)) for i in range(n)]


def build_root(pool: LabeledDataset, R: int = 100, bias: float = 0.0, seed=0,
               designated_class: int = 0) -> LabeledDataset:
    """Root dataset of size ``R`` with ``ceil(bias*R)`` samples of one class."""
    if len(pool) < R:
        raise UsageError(f"root pool has {len(pool)} samples, need {R}")
    if not 0.0 <= bias <= 1.0:
        raise UsageError(f"root bias must lie in [0, 1], got {bias}")
    rng = rng_for(seed, "build_root")
    n_biased = math.ceil(bias * R)
    of_class = np.flatnonzero(pool.y == designated_class)
    if of_class.size < n_biased:
        raise UsageError(
            f"pool has {of_class.size} samples of class {designated_class}, need {n_biased}"
        )
    chosen = rng.choice(of_class, size=n_biased, replace=False)
    remaining = np.setdiff1d(np.arange(len(pool)), chosen)
    chosen = np.concatenate([chosen, rng.choice(remaining, size=R - n_biased, replace=False)])
    return pool.subset(np.sort(chosen))


def embed_trigger(ds: LabeledDataset, trig: TriggerSpec, fraction: float, seed=0) -> LabeledDataset:
    """Copy of ``ds`` with a ``ceil(fraction*N)`` subset carrying the trigger."""
    if not 0.0 <= fraction <= 1.0:
        raise UsageError(f"poison fraction must lie in [0, 1], got {fraction}")
    trig.validate(ds.n_features, ds.n_classes)
    k = math.ceil(fraction * len(ds))
    if k == 0:
        return ds
    chosen = rng_for(seed, "embed_trigger").choice(len(ds), size=k, replace=False)
    X, y = ds.X.copy(), ds.y.copy()
    X[np.ix_(chosen, list(trig.indices))] = trig.value
    y[chosen] = trig.target
    return LabeledDataset(X, y, ds.n_classes, ds.ids)
