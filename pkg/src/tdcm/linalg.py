"""Dense helpers shared by the model, losses and baselines.

Matrices are plain 2-D numpy arrays (float64 unless a caller asks for
float32).  Functions here accept autodiff ``Var`` inputs wherever it makes
sense so that the same code runs with and without a tape.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tdcm import autodiff as ad


class ParameterError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class ActivationKind:
    """One of ``identity``, ``relu`` or ``leaky_relu`` (with ``slope`` in (0, 1))."""

    name: str = "relu"
    slope: float = 0.01

    def __post_init__(self):
        if self.name not in ("identity", "relu", "leaky_relu"):
            raise ParameterError(f"unknown activation {self.name!r}")
        if self.name == "leaky_relu" and not 0 < self.slope < 1:
            raise ParameterError(f"leaky_relu slope must be in (0, 1), got {self.slope}")

    @classmethod
    def parse(cls, text: str) -> "ActivationKind":
        """Parse ``relu``, ``identity``, ``leaky_relu`` or ``leaky_relu:0.1``."""
        name, _, slope = text.strip().lower().partition(":")
        name = name.replace("-", "_")
        if name == "leaky_relu" and slope:
            return cls(name, float(slope))
        if slope:
            raise ParameterError(f"activation {name!r} takes no parameter")
        return cls(name)

    def __str__(self):
        return f"leaky_relu:{self.slope:g}" if self.name == "leaky_relu" else self.name


IDENTITY = ActivationKind("identity")
RELU = ActivationKind("relu")


def apply_activation(kind: ActivationKind, x):
    if kind.name == "identity":
        return x
    if kind.name == "relu":
        if np.isscalar(x):
            return max(0.0, x)
        return ad.relu(x)
    if np.isscalar(x):
        return x if x >= 0 else kind.slope * x
    return ad.leaky_relu(x, kind.slope)


def softmax_rows(scores, tau: float = 1.0):
    """Row-wise softmax of ``scores / tau`` with per-row max subtraction."""
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    s = scores / tau
    s = s - ad.amax(s, axis=-1, keepdims=True)
    e = ad.exp(s)
    return e / ad.sum(e, axis=-1, keepdims=True)


def symmetrize(raw):
    shape = np.shape(ad.value_of(raw))
    if len(shape) != 2 or shape[0] != shape[1]:
        raise ShapeError(f"symmetrize needs a square matrix, got shape {shape}")
    return (raw + ad.transpose(raw)) * 0.5


def random_orthonormal_rows(k: int, b: int, seed) -> np.ndarray:
    """``k`` orthonormal rows in R^b from a QR of seeded Gaussian draws."""
    if k > b:
        raise DimensionError(f"cannot draw K={k} orthonormal rows in dimension b={b}")
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((b, k))
    q, r = np.linalg.qr(g)
    # fix the sign ambiguity of QR so the result is a function of the draw only
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    return np.ascontiguousarray(q.T)
