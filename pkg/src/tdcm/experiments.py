"""Experiment orchestration shared by the CLI and the acceptance suite.

An experiment is described by one flat key/value config: every TrainConfig
field, the synthetic-domain parameters, the perturbation scale, the baseline
algorithm and the sweep axis.  Config files use ``key = value`` lines with
``#`` comments.
"""
from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from tdcm import baselines as bl
from tdcm.datagen import DomainPair, DomainSpec, make_pair
from tdcm.metrics import evaluate
from tdcm.model import ConfigError
from tdcm.trainer import METRIC_NAMES, RunRecord, TrainConfig, train_and_evaluate

BASELINES = ("kmeans", "gmm", "soft-kmeans")
# sweep axis name -> ExperimentConfig key
SWEEP_AXES = {
    "tau": "tau",
    "L": "num_blocks",
    "alpha-mode": "alpha_mode",
    "beta": "beta",
    "perturbation": "perturbation_scale",
}


@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    dim: int = 16
    n_per_cluster: int = 500
    center_box: float = 5.0
    cov_scale: float = 1.0
    data_seed: int = 0
    perturbation_scale: float = 0.5
    baseline: str = "kmeans"
    num_seeds: int = 5

    def __post_init__(self):
        if self.baseline not in BASELINES:
            raise ConfigError(f"unknown baseline {self.baseline!r}; valid: {', '.join(BASELINES)}")
        if self.num_seeds < 1:
            raise ConfigError("num_seeds must be >= 1")
        if self.perturbation_scale < 0:
            raise ConfigError("perturbation_scale must be non-negative")
        try:
            self.domain_spec()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def domain_spec(self) -> DomainSpec:
        return DomainSpec(self.train.n_clusters, self.dim, self.n_per_cluster, self.center_box,
                          self.cov_scale, self.data_seed)

    def make_pair(self) -> DomainPair:
        return make_pair(self.domain_spec(), self.perturbation_scale)

    def to_flat(self) -> dict:
        flat = self.train.to_dict()
        flat.update({f.name: getattr(self, f.name) for f in fields(self) if f.name != "train"})
        return flat

    @classmethod
    def from_flat(cls, flat: dict) -> "ExperimentConfig":
        train_keys = {f.name for f in fields(TrainConfig)}
        own_keys = {f.name for f in fields(cls)} - {"train"}
        unknown = set(flat) - train_keys - own_keys
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        train = TrainConfig(**{k: v for k, v in flat.items() if k in train_keys})
        return cls(train, **{k: v for k, v in flat.items() if k in own_keys})

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        flat = self.to_flat()
        flat.update(coerce_values(overrides))
        return ExperimentConfig.from_flat(flat)


def _defaults() -> dict:
    return ExperimentConfig().to_flat()


def _coerce(key: str, text, default):
    if not isinstance(text, str):
        return text
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, (list, tuple)):
            return [int(v) for v in text.strip("[]()").split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None
    return text.strip("'\"")


def coerce_values(raw: dict) -> dict:
    """Convert string values to the type of each key's default."""
    defaults = _defaults()
    unknown = set(raw) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return {k: _coerce(k, v, defaults[k]) for k, v in raw.items()}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in raw:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        raw[key] = value
    return coerce_values(raw)


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    flat = _defaults()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        flat.update(parse_config_text(path.read_text(), str(path)))
    flat.update(coerce_values(overrides or {}))
    try:
        return ExperimentConfig.from_flat(flat)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def format_config(cfg: ExperimentConfig) -> str:
    lines = []
    for k, v in cfg.to_flat().items():
        if isinstance(v, (list, tuple)):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = str(v).lower()
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- single runs


def variant_name(cfg: TrainConfig) -> str:
    tags = [t for t, on in (("R", cfg.variant_R), ("O", cfg.variant_O), ("E", cfg.variant_E)) if on]
    return "tdcm" if not tags else "tdcm-variant-" + "".join(tags)


def run_tdcm(pair: DomainPair, cfg: TrainConfig, echo: dict | None = None) -> RunRecord:
    _, record = train_and_evaluate(pair, cfg)
    record.model = variant_name(cfg)
    if echo is not None:
        record.config = echo
    return record


def fit_baseline(algo: str, X, K: int, seed=0, tau: float = 1.0):
    if algo == "kmeans":
        return bl.fit_kmeans(X, K, seed)
    if algo == "gmm":
        return bl.fit_gmm(X, K, seed)
    if algo == "soft-kmeans":
        return bl.fit_soft_kmeans(X, K, tau, seed)
    raise ConfigError(f"unknown baseline {algo!r}; valid: {', '.join(BASELINES)}")


def run_baseline(pair: DomainPair, algo: str, seed=0, tau: float = 1.0, echo: dict | None = None) -> RunRecord:
    """Fit on the source domain, then label the target with the frozen centroids."""
    start = time.perf_counter()
    K = pair.n_clusters
    result = fit_baseline(algo, pair.source.X, K, seed, tau)
    src_labels = bl.transfer_eval_fixed_centroids(result, pair.source.X)
    tgt_labels = bl.transfer_eval_fixed_centroids(result, pair.target.X)
    return RunRecord(
        model=algo,
        config=echo if echo is not None else {"baseline": algo, "seed": seed, "n_clusters": K, "tau": tau},
        source=evaluate(src_labels, pair.source.labels),
        target=evaluate(tgt_labels, pair.target.labels),
        wall_time=time.perf_counter() - start,
        metadata={"pair": pair.metadata, "init": "k-means++ best of 10", "nmi_normalization": "geometric"},
    )


# ---------------------------------------------------------------- sweeps

SWEEP_COLUMNS = ("axis", "value", "seed") + tuple(
    f"{dom}_{m}" for dom in ("source", "target", "diff") for m in METRIC_NAMES
) + ("wall_time",)


def parse_sweep_values(axis: str, text: str) -> list:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; valid: {', '.join(SWEEP_AXES)}")
    items = [v.strip() for v in text.split(",") if v.strip()]
    if not items:
        raise ConfigError("sweep needs at least one value")
    key = SWEEP_AXES[axis]
    return [coerce_values({key: v})[key] for v in items]


def _sweep_job(job):
    flat, axis, value, seed = job
    cfg = ExperimentConfig.from_flat(flat)
    record = run_tdcm(cfg.make_pair(), cfg.train, echo=flat)
    row = {"axis": axis, "value": value, "seed": seed}
    for dom, report in (("source", record.source.as_dict()), ("target", record.target.as_dict()),
                        ("diff", record.diff)):
        for m in METRIC_NAMES:
            row[f"{dom}_{m}"] = report[m]
    row["wall_time"] = record.wall_time
    return row


def sweep_jobs(base: ExperimentConfig, axis: str, values: list, seeds: int) -> list:
    key = SWEEP_AXES[axis]
    jobs = []
    for value in values:
        for seed in range(seeds):
            flat = base.to_flat()
            flat[key] = value
            flat["seed"] = seed
            ExperimentConfig.from_flat(flat)  # validate every point before any compute
            jobs.append((flat, axis, value, seed))
    return jobs


def run_sweep(base: ExperimentConfig, axis: str, values: list, seeds: int | None = None, jobs: int = 1) -> list[dict]:
    """One TDCM run per (value, training seed) on the pair described by ``base``."""
    work = sweep_jobs(base, axis, values, seeds or base.num_seeds)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_sweep_job, work))
    return [_sweep_job(j) for j in work]


def write_sweep_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def summarize_sweep(rows: list[dict]) -> list[dict]:
    """Mean target/diff NMI per sweep value, in first-seen order."""
    by_value: dict = {}
    for row in rows:
        by_value.setdefault(row["value"], []).append(row)
    out = []
    for value, group in by_value.items():
        out.append({
            "value": value,
            "runs": len(group),
            **{f"{dom}_nmi": float(np.mean([r[f"{dom}_nmi"] for r in group])) for dom in ("source", "target", "diff")},
        })
    return out


# ---------------------------------------------------------------- reports


def aggregate(records: list[RunRecord]) -> dict[str, dict]:
    """Mean and count of every source/target/diff metric, grouped by model."""
    groups: dict[str, list[RunRecord]] = {}
    for r in records:
        groups.setdefault(r.model, []).append(r)
    table = {}
    for model, runs in groups.items():
        row = {"runs": len(runs)}
        for dom in ("source", "target", "diff"):
            for m in METRIC_NAMES:
                vals = [(r.diff[m] if dom == "diff" else getattr(getattr(r, dom), m)) for r in runs]
                row[f"{dom}_{m}"] = float(np.mean(vals))
        table[model] = row
    return table


def format_report(table: dict[str, dict]) -> str:
    domains = ("source", "target", "diff")
    head = f"{'model':<22}{'runs':>5}  " + "  ".join(f"{d + ' NMI/ARI/ACC':<21}" for d in domains)
    lines = [head, "-" * len(head)]
    for model, row in table.items():
        cells = ["/".join("%.3f" % row[f"{d}_{m}"] for m in METRIC_NAMES) for d in domains]
        lines.append(f"{model:<22}{row['runs']:>5}  " + "  ".join(f"{c:<21}" for c in cells))
    return "\n".join(lines)


def has_nan(rows) -> bool:
    return any(isinstance(v, float) and math.isnan(v) for row in rows for v in row.values())
