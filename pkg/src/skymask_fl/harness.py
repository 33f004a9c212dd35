"""Experiment configuration, the multi-round driver and result files."""

from __future__ import annotations

import configparser
import csv
import dataclasses
import json
import logging
import time
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .attacks import (
    ATTACKS,
    AgrAgnosticAttack,
    DBAAttack,
    FangKrumAttack,
    FangTrimAttack,
    LabelFlipAttack,
    NoAttack,
    ScalingAttack,
)
from .data import (
    PartitionSpec,
    TriggerSpec,
    build_root,
    embed_trigger,
    gen_synthetic,
    partition_noniid,
    rng_for,
    split,
)
from .defenses import FLTrust, Krum, Tolpegin, TrimmedMean
from .engine import FedAvg, Federation, FLParams, RoundState, malicious_flags, run_round
from .exceptions import ConfigurationError, NumericError
from .masks import SkyMask, SkyMaskParams

logger = logging.getLogger(__name__)

DEFENSES = ("fedavg", "krum", "trim", "fltrust", "tolpegin", "skymask", "skymask-nr")


@dataclass
class DatasetConfig:
    n_classes: int = 3
    n_features: int = 8
    n_train: int = 3000
    n_test: int = 1000
    root_pool: int = 500
    spread: float = 0.2


@dataclass
class PartitionConfig:
    n_clients: int = 20
    bias: float = 0.5


@dataclass
class RootConfig:
    size: int = 100
    bias: float = 0.0
    designated_class: int = 0


@dataclass
class ModelConfig:
    hidden: tuple[int, ...] = (16,)


@dataclass
class FLConfig:
    rounds: int = 50
    local_iters: int = 5
    lr: float = 0.05
    global_lr: float = 1.0
    batch_size: int = 32


@dataclass
class AttackConfig:
    kind: str = "none"
    fraction: float = 0.2
    lf_mode: str = "complement"
    gamma_init: float = 10.0
    gamma_tol: float = 1e-3
    direction: str = "inverse-std"
    lam_init: float = 10.0
    halving_steps: int = 20
    trigger_indices: tuple[int, ...] = (0, 1)
    trigger_value: float = 4.0
    target: int = 0
    poison_fraction: float = 0.5
    scale: float = 0.0  # 0 selects n / n_malicious


@dataclass
class DefenseConfig:
    kind: str = "fedavg"
    n_m: int = -1  # -1: the true attacker count, capped below n/2
    tau: float = 0.5
    mask_lr: float = 0.2
    normalize_lr: bool = True  # mask_lr is relative to the first gradient's peak
    max_iters: int = 300
    tol: float = 1e-6
    pca_dims: int = 3
    restarts: int = 25


@dataclass
class ExperimentSection:
    seed: int = 0
    out_dir: str = "runs/default"
    dump_every: int = 1


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    root: RootConfig = field(default_factory=RootConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    fl: FLConfig = field(default_factory=FLConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)

    @property
    def seed(self) -> int:
        return self.experiment.seed

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def set(self, dotted: str, raw) -> None:
        """Assign ``section.key`` from a string (or already typed) value."""
        section, _, key = dotted.partition(".")
        sec = getattr(self, section, None) if section in _sections() else None
        if sec is None or key not in {f.name for f in dataclasses.fields(sec)}:
            raise ConfigurationError(f"unknown config key {dotted!r}")
        setattr(sec, key, _coerce(dotted, _field_type(type(sec), key), raw))

    def validate(self) -> "ExperimentConfig":
        def bad(key, msg):
            raise ConfigurationError(f"{key}: {msg}")

        d, a, f, df = self.dataset, self.attack, self.fl, self.defense
        if d.n_classes < 2:
            bad("dataset.n_classes", "must be >= 2")
        if d.n_features < 1:
            bad("dataset.n_features", "must be >= 1")
        if d.n_train < d.n_classes:
            bad("dataset.n_train", "must be >= n_classes")
        if d.n_test < 1:
            bad("dataset.n_test", "must be >= 1")
        if d.spread <= 0:
            bad("dataset.spread", "must be positive")
        if self.partition.n_clients < 1:
            bad("partition.n_clients", "must be >= 1")
        if not 0.0 <= self.partition.bias <= 1.0:
            bad("partition.bias", "must lie in [0, 1]")
        if self.root.size < 1 or self.root.size > d.root_pool:
            bad("root.size", "must lie in [1, dataset.root_pool]")
        if not 0.0 <= self.root.bias <= 1.0:
            bad("root.bias", "must lie in [0, 1]")
        if not 0 <= self.root.designated_class < d.n_classes:
            bad("root.designated_class", "out of range")
        if any(h < 1 for h in self.model.hidden):
            bad("model.hidden", "widths must be >= 1")
        if f.rounds < 1:
            bad("fl.rounds", "must be >= 1")
        if f.local_iters < 1:
            bad("fl.local_iters", "must be >= 1")
        if f.lr <= 0:
            bad("fl.lr", "must be positive")
        if f.global_lr <= 0:
            bad("fl.global_lr", "must be positive")
        if f.batch_size < 1:
            bad("fl.batch_size", "must be >= 1")
        if a.kind not in ATTACKS:
            bad("attack.kind", f"must be one of {ATTACKS}")
        if not 0.0 <= a.fraction < 1.0:
            bad("attack.fraction", "must lie in [0, 1)")
        if a.lf_mode not in ("complement", "next"):
            bad("attack.lf_mode", "must be 'complement' or 'next'")
        if a.direction not in ("inverse-std", "inverse-unit", "inverse-sign"):
            bad("attack.direction", "unknown perturbation direction")
        if any(i < 0 or i >= d.n_features for i in a.trigger_indices) or not a.trigger_indices:
            bad("attack.trigger_indices", "must be non-empty and within the feature range")
        if not 0 <= a.target < d.n_classes:
            bad("attack.target", "out of range")
        if not 0.0 <= a.poison_fraction <= 1.0:
            bad("attack.poison_fraction", "must lie in [0, 1]")
        if a.scale < 0:
            bad("attack.scale", "must be >= 0")
        if df.kind not in DEFENSES:
            bad("defense.kind", f"must be one of {DEFENSES}")
        if not 0.0 < df.tau < 1.0:
            bad("defense.tau", "must lie in (0, 1)")
        if df.mask_lr < 0:
            bad("defense.mask_lr", "must be >= 0")
        if df.pca_dims < 1:
            bad("defense.pca_dims", "must be >= 1")
        if df.restarts < 1:
            bad("defense.restarts", "must be >= 1")
        return self


def _sections() -> dict[str, type]:
    hints = typing.get_type_hints(ExperimentConfig)
    return {f.name: hints[f.name] for f in dataclasses.fields(ExperimentConfig)}


def _field_type(cls, key):
    return typing.get_type_hints(cls)[key]


def _coerce(path: str, typ, raw):
    try:
        if typ is bool:
            return raw if isinstance(raw, bool) else str(raw).strip().lower() in ("1", "true", "yes")
        if typ in (int, float, str):
            if typ is int and isinstance(raw, float) and not raw.is_integer():
                raise ValueError(raw)
            return typ(raw) if not isinstance(raw, str) else typ(raw.strip())
        if typing.get_origin(typ) is tuple:
            (inner, _) = typing.get_args(typ)
            if isinstance(raw, str):
                items = [s for s in raw.replace(" ", "").split(",") if s]
            else:
                items = list(raw)
            return tuple(inner(x) for x in items)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{path}: cannot parse {raw!r} as {typ}") from exc
    raise ConfigurationError(f"{path}: unsupported field type {typ}")


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def load_config(path=None, text: str | None = None) -> ExperimentConfig:
    """Parse an INI-style config; missing keys take defaults, unknown keys fail."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        if text is not None:
            parser.read_string(text)
        elif path is not None:
            with open(path) as fh:
                parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigurationError(f"cannot parse config: {exc}") from exc
    cfg = ExperimentConfig()
    sections = _sections()
    for name in parser.sections():
        if name not in sections:
            raise ConfigurationError(f"unknown config section [{name}]")
        for key, raw in parser.items(name):
            cfg.set(f"{name}.{key}", raw)
    return cfg.validate()


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for name in _sections():
        lines.append(f"[{name}]")
        sec = getattr(cfg, name)
        for f in dataclasses.fields(sec):
            lines.append(f"{f.name} = {_format(getattr(sec, f.name))}")
        lines.append("")
    return "\n".join(lines)


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(dump_config(cfg))


@dataclass
class RoundRecord:
    round: int
    accuracy: float
    attack_success_rate: float | None = None
    fpr: float | None = None
    fnr: float | None = None
    benign_size: int | None = None
    n_clusters: int | None = None
    mask_iterations: int | None = None
    wall_time: float = 0.0


ROUND_COLUMNS = ("round", "accuracy", "attack_success_rate", "fpr", "fnr", "benign_size",
                 "n_clusters", "mask_iterations")
PCA_COLUMNS = ("client_id", "x", "y", "is_malicious_truth", "verdict")
LAYER_COLUMNS = ("round", "client_id", "layer", "ones_fraction", "is_malicious_truth")


@dataclass
class RoundDump:
    """Per-round detection details kept for scatter and mask-layer files."""

    round: int
    projection: np.ndarray | None
    truth: np.ndarray
    verdict: np.ndarray
    layer_ones: np.ndarray | None
    layer_names: list[str]


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    records: list[RoundRecord]
    dumps: list[RoundDump]
    final_W: np.ndarray


def make_attack(cfg: ExperimentConfig):
    a = cfg.attack
    trig = TriggerSpec(a.trigger_indices, a.trigger_value, a.target)
    scale = a.scale or None
    return {
        "none": lambda: NoAttack(),
        "lf": lambda: LabelFlipAttack(a.lf_mode),
        "fang-trim": lambda: FangTrimAttack(),
        "fang-krum": lambda: FangKrumAttack(a.lam_init, a.halving_steps),
        "min-max": lambda: AgrAgnosticAttack("min-max", a.gamma_init, a.gamma_tol, a.direction),
        "min-sum": lambda: AgrAgnosticAttack("min-sum", a.gamma_init, a.gamma_tol, a.direction),
        "scaling": lambda: ScalingAttack(trig, a.poison_fraction, scale),
        "dba": lambda: DBAAttack(trig, a.poison_fraction, scale),
    }[a.kind]()


def make_defense(cfg: ExperimentConfig):
    d = cfg.defense
    n_m = None if d.n_m < 0 else d.n_m
    if d.kind in ("skymask", "skymask-nr"):
        return SkyMask(SkyMaskParams(d.kind, d.tau, d.mask_lr, d.max_iters, d.tol, d.pca_dims,
                                     d.restarts, d.normalize_lr))
    return {
        "fedavg": lambda: FedAvg(),
        "krum": lambda: Krum(n_m),
        "trim": lambda: TrimmedMean(n_m),
        "fltrust": lambda: FLTrust(),
        "tolpegin": lambda: Tolpegin(d.pca_dims, d.restarts),
    }[d.kind]()


def build_federation(cfg: ExperimentConfig):
    """Data splits, client partition, root set and initial weights."""
    d, seed = cfg.dataset, cfg.seed
    full = gen_synthetic(d.n_classes, d.n_features, d.n_train + d.n_test + d.root_pool,
                         d.spread, seed)
    train, test, pool = split(full, [d.n_train, d.n_test, d.root_pool], seed)
    root = build_root(pool, cfg.root.size, cfg.root.bias, seed, cfg.root.designated_class)
    clients = partition_noniid(train, PartitionSpec(cfg.partition.n_clients, cfg.partition.bias, seed))
    layout = nn.LayerLayout((d.n_features, *cfg.model.hidden, d.n_classes))
    n = cfg.partition.n_clients
    flags = (np.zeros(n, dtype=bool) if cfg.attack.kind == "none"
             else malicious_flags(n, cfg.attack.fraction))
    fl = FLParams(cfg.fl.local_iters, cfg.fl.lr, cfg.fl.global_lr, cfg.fl.batch_size)
    fed = Federation(layout, clients, flags, root, fl, seed)
    W0 = nn.init_params(layout, rng_for(seed, "init_params"))
    return fed, test, W0


def attack_success_rate(W, layout, test, trig: TriggerSpec) -> float | None:
    """Share of non-target test samples sent to the target once fully triggered."""
    keep = np.flatnonzero(test.y != trig.target)
    if keep.size == 0:
        return None
    triggered = embed_trigger(test.subset(keep), trig, 1.0)
    return float(np.mean(nn.predict(W, layout, triggered.X) == trig.target))


def run_experiment(cfg: ExperimentConfig, progress=None) -> ExperimentResult:
    cfg.validate()
    fed, test, W0 = build_federation(cfg)
    attack = make_attack(cfg)
    defense = make_defense(cfg)
    a = cfg.attack
    trig = TriggerSpec(a.trigger_indices, a.trigger_value, a.target)
    state = RoundState(0, W0)
    records, dumps = [], []
    for t in range(cfg.fl.rounds):
        start = time.perf_counter()
        try:
            state, report = run_round(state, fed, defense, attack)
        except NumericError as exc:
            raise NumericError(f"round {t}: {exc}", layer=exc.layer) from exc
        acc = nn.evaluate(state.W, fed.layout, test.X, test.y)
        asr = attack_success_rate(state.W, fed.layout, test, trig) if attack.targeted else None
        rec = RoundRecord(t, acc, asr)
        if report is not None:
            rec.fpr, rec.fnr = report.fpr, report.fnr
            rec.benign_size = len(report.benign_set)
            rec.n_clusters = report.n_clusters
            rec.mask_iterations = report.mask_iterations
            every = cfg.experiment.dump_every
            if every > 0 and t % every == 0:
                dumps.append(RoundDump(t, report.projection, fed.malicious.copy(),
                                       report.malicious.copy(), report.layer_ones,
                                       fed.layout.layer_names))
        rec.wall_time = time.perf_counter() - start
        records.append(rec)
        if progress is not None:
            progress(rec)
    return ExperimentResult(cfg, records, dumps, np.array(state.W))


def mean_rates(records) -> tuple[float | None, float | None]:
    """Mean FPR and FNR over the rounds where each is defined."""
    def mean(vals):
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    return mean(r.fpr for r in records), mean(r.fnr for r in records)


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path: Path, columns, rows):
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for row in rows:
                w.writerow([_cell(v) for v in row])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def summarize(records, config: ExperimentConfig | None = None) -> dict:
    fpr, fnr = mean_rates(records)
    asrs = [r.attack_success_rate for r in records if r.attack_success_rate is not None]
    return {
        "rounds": len(records),
        "final_accuracy": records[-1].accuracy if records else None,
        "final_attack_success_rate": records[-1].attack_success_rate if records else None,
        "mean_fpr": fpr,
        "mean_fnr": fnr,
        "mean_attack_success_rate": float(np.mean(asrs)) if asrs else None,
        "config": None if config is None else config.to_dict(),
    }


def write_outputs(records, dumps, out_dir, config: ExperimentConfig | None = None) -> Path:
    """Write rounds.csv, summary.json, timing.csv and per-round detection dumps."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    _write_csv(out / "rounds.csv", ROUND_COLUMNS,
               [[getattr(r, c) for c in ROUND_COLUMNS] for r in records])
    _write_csv(out / "timing.csv", ("round", "wall_time"),
               [[r.round, r.wall_time] for r in records])
    summary = summarize(records, config)
    try:
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {out / 'summary.json'}: {exc}") from exc
    for dump in dumps:
        if dump.projection is not None:
            proj = np.zeros((len(dump.truth), 2))
            k = min(2, dump.projection.shape[1])
            proj[:, :k] = dump.projection[: len(dump.truth), :k]
            rows = [[i, proj[i, 0], proj[i, 1], dump.truth[i],
                     "malicious" if dump.verdict[i] else "benign"] for i in range(len(dump.truth))]
            if dump.projection.shape[0] > len(dump.truth):
                i = len(dump.truth)
                p = np.zeros(2)
                p[:k] = dump.projection[i, :k]
                rows.append(["root", p[0], p[1], False, "benign"])
            _write_csv(out / f"pca_round_{dump.round}.csv", PCA_COLUMNS, rows)
        if dump.layer_ones is not None:
            rows = []
            for i in range(dump.layer_ones.shape[0]):
                cid = i if i < len(dump.truth) else "root"
                is_mal = dump.truth[i] if i < len(dump.truth) else False
                for j, name in enumerate(dump.layer_names):
                    rows.append([dump.round, cid, name, dump.layer_ones[i, j], is_mal])
            _write_csv(out / f"mask_layers_round_{dump.round}.csv", LAYER_COLUMNS, rows)
    return out
