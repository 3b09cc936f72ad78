"""Synthetic Gaussian source/target domains and tabular dataset I/O.

A source domain has ``K`` equal-sized Gaussian clusters with random centers
and random covariances.  Its target twin keeps the covariances, shifts every
center by isotropic Gaussian noise scaled to the mean pairwise center
distance, and draws fresh samples.

CSV layout: one header row ``f0,...,f{d-1}[,label]``, then one sample per
row.  Pair metadata goes into JSON sidecars.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist

COV_FLOOR = 0.05


class ParseError(ValueError):
    pass


@dataclass
class DomainSpec:
    K: int = 2
    dim: int = 16
    n_per_cluster: int = 500
    center_box: float = 5.0
    cov_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.K < 2:
            raise ValueError(f"K must be >= 2, got {self.K}")
        if self.n_per_cluster < 1:
            raise ValueError("n_per_cluster must be >= 1")
        if not self.cov_scale > 0:
            raise ValueError("cov_scale must be positive")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")


@dataclass
class Domain:
    X: np.ndarray
    labels: np.ndarray
    centers: np.ndarray
    covariances: np.ndarray


@dataclass
class DomainPair:
    source: Domain
    target: Domain
    perturbation_scale: float
    metadata: dict = field(default_factory=dict)

    @property
    def n_clusters(self) -> int:
        return int(self.source.centers.shape[0])


def _sample(rng, centers, covariances, n_per_cluster):
    K, d = centers.shape
    X = np.empty((K * n_per_cluster, d))
    for j in range(K):
        chol = np.linalg.cholesky(covariances[j])
        noise = rng.standard_normal((n_per_cluster, d))
        X[j * n_per_cluster:(j + 1) * n_per_cluster] = centers[j] + noise @ chol.T
    labels = np.repeat(np.arange(K), n_per_cluster)
    return X, labels


def gen_source(spec: DomainSpec) -> Domain:
    rng = np.random.default_rng(spec.seed)
    d = spec.dim
    centers = rng.uniform(-spec.center_box, spec.center_box, size=(spec.K, d))
    covs = np.empty((spec.K, d, d))
    for j in range(spec.K):
        A = rng.standard_normal((d, d))
        covs[j] = A @ A.T * spec.cov_scale / d + COV_FLOOR * np.eye(d)
    X, labels = _sample(rng, centers, covs, spec.n_per_cluster)
    return Domain(X, labels, centers, covs)


def mean_pairwise_distance(centers: np.ndarray) -> float:
    return float(pdist(centers).mean())


def perturb_to_target(source: Domain, perturbation_scale: float, seed) -> Domain:
    if perturbation_scale < 0:
        raise ValueError("perturbation_scale must be non-negative")
    rng = np.random.default_rng(seed)
    K = source.centers.shape[0]
    n_per = len(source.labels) // K
    sd = perturbation_scale * mean_pairwise_distance(source.centers)
    offsets = rng.standard_normal(source.centers.shape)
    centers = source.centers + sd * offsets if perturbation_scale > 0 else source.centers.copy()
    X, labels = _sample(rng, centers, source.covariances, n_per)
    return Domain(X, labels, centers, source.covariances.copy())


def make_pair(spec: DomainSpec, perturbation_scale: float = 0.5, target_seed=None) -> DomainPair:
    """Source from ``spec`` and its perturbed target.

    The target seed defaults to a stream derived from the source seed.
    """
    if target_seed is None:
        target_seed = [spec.seed, 1]
    source = gen_source(spec)
    target = perturb_to_target(source, perturbation_scale, target_seed)
    meta = {
        "spec": asdict(spec),
        "perturbation_scale": perturbation_scale,
        "target_seed": target_seed,
        "source_centers": source.centers.tolist(),
        "target_centers": target.centers.tolist(),
        "mean_pairwise_center_distance": mean_pairwise_distance(source.centers),
    }
    return DomainPair(source, target, perturbation_scale, meta)


# ---------------------------------------------------------------- tabular I/O


def save_tabular(path, X: np.ndarray, labels=None) -> None:
    X = np.asarray(X, dtype=float)
    header = [f"f{i}" for i in range(X.shape[1])]
    if labels is not None:
        header.append("label")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, row in enumerate(X):
            # repr keeps every float round-trippable
            cells = [repr(float(v)) for v in row]
            if labels is not None:
                cells.append(str(int(labels[i])))
            writer.writerow(cells)


def load_tabular(path, has_labels: bool = True):
    """Read a dataset CSV; returns ``(X, labels)`` with ``labels`` None when absent."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: empty file (line 1)") from None
        with_label = bool(header) and header[-1] == "label"
        features = header[:-1] if with_label else header
        if not features or features != [f"f{i}" for i in range(len(features))]:
            raise ParseError(f"{path}: line 1: unknown header {','.join(header)!r}")
        if has_labels and not with_label:
            raise ParseError(f"{path}: line 1: no label column in header")
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row[:len(features)]])
            except ValueError:
                raise ParseError(f"{path}: line {lineno}: non-numeric feature value") from None
            if with_label:
                try:
                    labels.append(int(row[-1]))
                except ValueError:
                    raise ParseError(f"{path}: line {lineno}: label must be an integer") from None
    X = np.array(rows, dtype=float).reshape(len(rows), len(features))
    if not np.all(np.isfinite(X)):
        raise ParseError(f"{path}: non-finite feature values")
    y = np.array(labels, dtype=int) if (with_label and has_labels) else None
    return X, y


SOURCE_CSV, TARGET_CSV = "source.csv", "target.csv"


def save_pair(pair: DomainPair, directory) -> list[Path]:
    """Write ``source.csv``/``target.csv`` with one JSON sidecar each."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for role, dom, name in (("source", pair.source, SOURCE_CSV), ("target", pair.target, TARGET_CSV)):
        csv_path = directory / name
        save_tabular(csv_path, dom.X, dom.labels)
        side = csv_path.with_suffix(".json")
        meta = dict(pair.metadata, role=role, covariances=dom.covariances.tolist())
        side.write_text(json.dumps(meta, indent=1))
        written += [csv_path, side]
    return written


def _read_sidecar(csv_path: Path) -> dict:
    side = csv_path.with_suffix(".json")
    return json.loads(side.read_text()) if side.exists() else {}


def load_pair(directory) -> DomainPair:
    directory = Path(directory)
    src_csv, tgt_csv = directory / SOURCE_CSV, directory / TARGET_CSV
    for p in (src_csv, tgt_csv):
        if not p.exists():
            raise FileNotFoundError(f"missing dataset file {p}")
    Xs, ys = load_tabular(src_csv)
    Xt, yt = load_tabular(tgt_csv)
    smeta, tmeta = _read_sidecar(src_csv), _read_sidecar(tgt_csv)

    def dom(X, y, m, key):
        d = X.shape[1]
        centers = np.asarray(m.get(key, []), dtype=float).reshape(-1, d)
        covs = np.asarray(m.get("covariances", []), dtype=float).reshape(-1, d, d)
        return Domain(X, y, centers, covs)

    meta = {k: v for k, v in smeta.items() if k not in ("role", "covariances")}
    return DomainPair(
        dom(Xs, ys, smeta, "source_centers"),
        dom(Xt, yt, tmeta, "target_centers"),
        float(meta.get("perturbation_scale", float("nan"))),
        meta,
    )


def batch_iterator(X, batch_size: int, shuffle_seed=None) -> list[np.ndarray]:
    """Index batches covering every row once; the last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = X if isinstance(X, int) else len(X)
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]
