"""Training objective: weighted clustering loss, cluster-balance entropy and
an orthogonality penalty on the effective score matrices."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tdcm import autodiff as ad
from tdcm.model import ConfigError, ScoreParams, StackTrace

ALPHA_MODES = ("linear", "last-only", "uniform")


def alpha_schedule(L: int, mode: str = "linear") -> list[float]:
    if L < 1:
        raise ConfigError(f"alpha schedule needs L >= 1, got {L}")
    if mode == "linear":
        total = L * (L + 1) / 2
        return [l / total for l in range(1, L + 1)]
    if mode in ("last-only", "last"):
        return [0.0] * (L - 1) + [1.0]
    if mode == "uniform":
        return [1.0 / L] * L
    raise ConfigError(f"unknown alpha mode {mode!r}; choose from {ALPHA_MODES}")


@dataclass
class LossWeights:
    alpha: tuple[float, ...]
    beta: float = 1.0
    lambda_orth: float = 1.0
    # flip the entropy term to the sign printed in the original objective
    literal_entropy: bool = False

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=float)
        if alpha.ndim != 1 or len(alpha) == 0 or np.any(alpha < 0) or alpha.sum() <= 0:
            raise ConfigError("alpha must be a non-empty list of non-negative weights")
        if self.beta < 0 or self.lambda_orth < 0:
            raise ConfigError("beta and lambda_orth must be non-negative")
        self.alpha = tuple(float(a) for a in alpha / alpha.sum())

    @classmethod
    def default(cls, L: int, mode: str = "linear", **kwargs) -> "LossWeights":
        return cls(tuple(alpha_schedule(L, mode)), **kwargs)


@dataclass
class LossBreakdown:
    clustering: object
    entropy: object
    orthogonality: object
    total: object

    def as_floats(self) -> dict[str, float]:
        return {
            name: float(np.asarray(ad.value_of(getattr(self, name))).reshape(()))
            for name in ("clustering", "entropy", "orthogonality", "total")
        }


def _check_alpha(trace: StackTrace, w: LossWeights):
    if len(w.alpha) != trace.num_blocks:
        raise ConfigError(f"{len(w.alpha)} alpha weights for {trace.num_blocks} blocks")


def clustering_loss(trace: StackTrace, Z, sp: ScoreParams, w: LossWeights):
    """``-sum_l alpha_l mean_i sum_j delta_ij^(l) score(z_i, c_j^(l-1))``."""
    _check_alpha(trace, w)
    n = np.shape(ad.value_of(Z))[0]
    loss = 0.0
    for a, delta, s in zip(w.alpha, trace.assignments, trace.scores):
        if a == 0:
            continue
        loss = loss - a * ad.sum(delta * s) / float(n)
    return loss


def cluster_proportions(delta):
    return ad.mean(delta, axis=0)


def entropy_loss(trace: StackTrace, w: LossWeights):
    """Alpha-weighted ``sum_j pi_j log pi_j`` (negative entropy, in nats).

    Each block contributes a value in ``[-log K, 0]``; minimizing favors
    balanced clusters.
    """
    _check_alpha(trace, w)
    loss = 0.0
    for a, delta in zip(w.alpha, trace.assignments):
        if a == 0:
            continue
        loss = loss + a * ad.sum(ad.xlogx(cluster_proportions(delta)))
    return -loss if w.literal_entropy else loss


def orthogonality_penalty(sp: ScoreParams):
    total = 0.0
    for m in sp.effective():
        b = np.shape(ad.value_of(m))[0]
        r = m @ ad.transpose(m) - np.eye(b)
        total = total + ad.sum(r * r)
    return total


def total_loss(trace: StackTrace, Z, sp: ScoreParams, w: LossWeights) -> LossBreakdown:
    clustering = clustering_loss(trace, Z, sp, w)
    entropy = entropy_loss(trace, w)
    orth = orthogonality_penalty(sp)
    total = clustering + w.beta * entropy
    if w.lambda_orth > 0:
        total = total + w.lambda_orth * orth
    return LossBreakdown(clustering, entropy, orth, total)
