"""External clustering metrics: NMI, ARI and ACC."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import comb

NMI_NORMALIZATION = "geometric"


@dataclass
class ContingencyTable:
    counts: np.ndarray  # rows: predicted labels, columns: true labels

    @property
    def n(self) -> int:
        return int(self.counts.sum())


@dataclass
class MetricsReport:
    nmi: float
    ari: float
    acc: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def contingency(pred, true) -> ContingencyTable:
    pred, true = np.asarray(pred, dtype=int), np.asarray(true, dtype=int)
    if pred.shape != true.shape or pred.ndim != 1:
        raise ValueError(f"label vectors differ in shape: {pred.shape} vs {true.shape}")
    if pred.size and (pred.min() < 0 or true.min() < 0):
        raise ValueError("labels must be non-negative integers")
    rows = pred.max() + 1 if pred.size else 0
    cols = true.max() + 1 if true.size else 0
    counts = np.zeros((rows, cols), dtype=np.int64)
    np.add.at(counts, (pred, true), 1)
    return ContingencyTable(counts)


def _entropy(counts: np.ndarray, n: int) -> float:
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def nmi(table: ContingencyTable) -> float:
    """Mutual information over the geometric mean of the two entropies."""
    c = table.counts.astype(float)
    n = table.n
    if n < 1:
        raise ValueError("empty contingency table")
    h_pred = _entropy(c.sum(axis=1), n)
    h_true = _entropy(c.sum(axis=0), n)
    if h_pred == 0 and h_true == 0:
        return 1.0
    if h_pred == 0 or h_true == 0:
        return 0.0
    outer = np.outer(c.sum(axis=1), c.sum(axis=0))
    nz = c > 0
    mi = float((c[nz] / n * np.log(c[nz] * n / outer[nz])).sum())
    return float(np.clip(mi / np.sqrt(h_pred * h_true), 0.0, 1.0))


def ari(table: ContingencyTable) -> float:
    c = table.counts
    n = table.n
    if n < 2:
        raise ValueError("ARI needs at least two samples")
    index = comb(c, 2).sum()
    a = comb(c.sum(axis=1), 2).sum()
    b = comb(c.sum(axis=0), 2).sum()
    expected = a * b / comb(n, 2)
    maximum = (a + b) / 2
    if maximum == expected:
        # both partitions trivial (all-one-cluster or all-singletons)
        return 1.0 if index == maximum else 0.0
    return float((index - expected) / (maximum - expected))


def hungarian(cost) -> list[tuple[int, int]]:
    """Minimum-cost matching of a rectangular cost matrix.

    The matrix is zero-padded to square; pairs that fall into the padding are
    dropped, so the result has ``min(m, n)`` entries.
    """
    cost = np.asarray(cost, dtype=float)
    m, n = cost.shape
    size = max(m, n)
    padded = np.zeros((size, size))
    padded[:m, :n] = cost
    rows, cols = linear_sum_assignment(padded)
    return [(int(r), int(c)) for r, c in zip(rows, cols) if r < m and c < n]


def acc(pred, true) -> float:
    table = contingency(pred, true).counts
    if table.size == 0:
        return 0.0
    matching = hungarian(-table)
    return float(sum(table[r, c] for r, c in matching) / table.sum())


def evaluate(pred, true) -> MetricsReport:
    table = contingency(pred, true)
    return MetricsReport(nmi(table), ari(table), acc(pred, true))
