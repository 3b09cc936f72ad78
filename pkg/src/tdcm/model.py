"""Encoder and learnable centroid-updating blocks.

A forward pass maps inputs ``X`` to embeddings ``Z`` with an MLP, then runs
``L`` blocks starting from orthonormal centroids.  Block ``l`` softly assigns
every embedding to the current centroids with the learned score

    score(z, c) = -act((W_Q p) . (W_K p)) / tau,   p = z - c

and moves each centroid to the responsibility-weighted mean of the batch.
All functions run on numpy arrays or on autodiff ``Var`` parameters.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from tdcm import autodiff as ad
from tdcm.linalg import (
    IDENTITY,
    RELU,
    ActivationKind,
    DimensionError,
    ShapeError,
    apply_activation,
    random_orthonormal_rows,
    softmax_rows,
    symmetrize,
)

EMPTY_MASS = 1e-12
PSD_EPS = 1e-6
SCORE_MODES = ("symmetric", "raw", "psd")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- encoder


@dataclass
class EncoderParams:
    weights: list
    biases: list
    activations: list[ActivationKind]

    @property
    def input_dim(self) -> int:
        return int(np.shape(ad.value_of(self.weights[0]))[0])

    @property
    def output_dim(self) -> int:
        return int(np.shape(ad.value_of(self.weights[-1]))[1])

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ShapeError("one bias per layer is required")
        if len(self.activations) != len(self.weights) - 1:
            raise ShapeError("one activation per hidden layer is required")
        for w_in, w_out in zip(self.weights, self.weights[1:]):
            if np.shape(ad.value_of(w_in))[1] != np.shape(ad.value_of(w_out))[0]:
                raise ShapeError("encoder layer dimensions do not chain")

    def named(self) -> dict[str, object]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"enc.w{i}"] = w
            out[f"enc.b{i}"] = b
        return out

    @classmethod
    def from_named(cls, params, activations) -> "EncoderParams":
        n = len(activations) + 1
        return cls(
            [params[f"enc.w{i}"] for i in range(n)],
            [params[f"enc.b{i}"] for i in range(n)],
            list(activations),
        )


def init_encoder(
    d: int,
    b: int,
    hidden: tuple[int, ...] = (64, 64),
    activation: ActivationKind = RELU,
    seed=0,
    dtype=np.float64,
) -> EncoderParams:
    """MLP ``d -> hidden... -> b`` with He-uniform weights and zero biases."""
    rng = np.random.default_rng(seed)
    dims = [d, *hidden, b]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims, dims[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return EncoderParams(weights, biases, [activation] * len(hidden))


def encode(params: EncoderParams, X):
    x_shape = np.shape(ad.value_of(X))
    if len(x_shape) != 2 or x_shape[1] != params.input_dim:
        raise ShapeError(f"encoder expects inputs with {params.input_dim} columns, got shape {x_shape}")
    h = X
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i < last:
            h = apply_activation(params.activations[i], h)
    return h


# ---------------------------------------------------------------- scores


@dataclass
class ScoreParams:
    """Raw score matrices plus how they are turned into effective ones.

    ``mode`` is ``symmetric`` (W = (raw + raw^T) / 2), ``raw`` (used as is;
    the ablation without the symmetry constraint) or ``psd`` (W_Q = W_K =
    A A^T + eps I with A = wq_raw, which makes the quadratic form PSD for any
    activation).
    """

    wq_raw: object
    wk_raw: object
    activation: ActivationKind = RELU
    tau: float = 1.0
    mode: str = "symmetric"

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"temperature must be positive, got {self.tau}")
        if self.mode not in SCORE_MODES:
            raise ConfigError(f"unknown score mode {self.mode!r}; choose from {SCORE_MODES}")

    @classmethod
    def identity(cls, b: int, **kwargs) -> "ScoreParams":
        return cls(np.eye(b), np.eye(b), **kwargs)

    def effective(self):
        if self.mode == "raw":
            return self.wq_raw, self.wk_raw
        if self.mode == "psd":
            a = self.wq_raw
            b = np.shape(ad.value_of(a))[0]
            w = a @ ad.transpose(a) + PSD_EPS * np.eye(b)
            return w, w
        return symmetrize(self.wq_raw), symmetrize(self.wk_raw)


def _quadratic(P, wq, wk):
    """``(W_Q p) . (W_K p)`` over the last axis of ``P``."""
    return ad.sum((P @ ad.transpose(wq)) * (P @ ad.transpose(wk)), axis=-1)


def score(z, c, sp: ScoreParams) -> float:
    z, c = np.asarray(z, dtype=float), np.asarray(c, dtype=float)
    if z.shape != c.shape or z.ndim != 1:
        raise ShapeError(f"score needs two vectors of equal length, got {z.shape} and {c.shape}")
    wq, wk = sp.effective()
    p = z - c
    return -apply_activation(sp.activation, float((wq @ p) @ (wk @ p))) / sp.tau


def activated_distances(Z, C, sp: ScoreParams):
    """``act((W_Q p) . (W_K p))`` for every sample/centroid pair, shape N x K."""
    wq, wk = sp.effective()
    z_shape, c_shape = np.shape(ad.value_of(Z)), np.shape(ad.value_of(C))
    if z_shape[-1] != c_shape[-1]:
        raise ShapeError(f"embedding dim {z_shape[-1]} != centroid dim {c_shape[-1]}")
    n, k, b = z_shape[0], c_shape[0], z_shape[1]
    P = ad.reshape(Z, (n, 1, b)) - ad.reshape(C, (1, k, b))
    return apply_activation(sp.activation, _quadratic(P, wq, wk))


def pairwise_scores(Z, C, sp: ScoreParams):
    return -activated_distances(Z, C, sp) / sp.tau


def attention_score(z, c, wq, wk, activation: ActivationKind = IDENTITY, tau: float = 1.0) -> float:
    """Plain bilinear attention score ``act(W_Q z . W_K c) / tau``.

    This is the unconstrained form that does not guarantee a maximum at
    ``z == c``; kept for the counterexample.
    """
    wq, wk = np.asarray(wq, dtype=float), np.asarray(wk, dtype=float)
    raw = float((wq @ np.asarray(z, dtype=float)) @ (wk @ np.asarray(c, dtype=float)))
    return apply_activation(activation, raw) / tau


# ---------------------------------------------------------------- blocks


@dataclass
class BlockStackConfig:
    num_blocks: int
    embed_dim: int
    n_clusters: int

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ConfigError(f"need at least one block, got L={self.num_blocks}")
        if self.n_clusters < 2:
            raise ConfigError(f"need K >= 2 clusters, got K={self.n_clusters}")
        if self.n_clusters > self.embed_dim:
            raise ConfigError(
                f"orthogonal centroid init needs K <= b, got K={self.n_clusters}, b={self.embed_dim}"
            )


@dataclass
class CentroidState:
    centroids: object
    block_index: int = 0


def init_centroids(cfg: BlockStackConfig, seed=None, mode: str = "identity", dtype=np.float64) -> CentroidState:
    if cfg.n_clusters > cfg.embed_dim:
        raise ConfigError(f"K={cfg.n_clusters} exceeds embedding dim b={cfg.embed_dim}")
    if mode == "identity":
        c = np.eye(cfg.n_clusters, cfg.embed_dim, dtype=dtype)
    elif mode == "random":
        try:
            c = random_orthonormal_rows(cfg.n_clusters, cfg.embed_dim, seed).astype(dtype)
        except DimensionError as exc:
            raise ConfigError(str(exc)) from exc
    else:
        raise ConfigError(f"unknown centroid init mode {mode!r}")
    return CentroidState(c, 0)


def assign(Z, state, sp: ScoreParams):
    """Soft assignment of every row of ``Z`` to the centroids (rows sum to 1)."""
    C = state.centroids if isinstance(state, CentroidState) else state
    return softmax_rows(-activated_distances(Z, C, sp), sp.tau)


def update_centroids(Z, delta, previous=None, global_normalization: bool = False) -> CentroidState:
    """Responsibility-weighted means, normalized per cluster.

    A cluster whose total responsibility is below 1e-12 keeps its previous
    centroid.  ``global_normalization`` divides every cluster by the total
    mass N instead.
    """
    prev_state = previous if isinstance(previous, CentroidState) else None
    prev = prev_state.centroids if prev_state else previous
    block = prev_state.block_index + 1 if prev_state else 0
    weighted = ad.transpose(delta) @ Z
    if global_normalization:
        n = np.shape(ad.value_of(Z))[0]
        return CentroidState(weighted / float(n), block)
    mass = ad.sum(delta, axis=0)
    empty = np.asarray(ad.value_of(mass)) < EMPTY_MASS
    if not empty.any():
        return CentroidState(weighted / ad.reshape(mass, (-1, 1)), block)
    if prev is None:
        raise ValueError("an empty cluster needs the previous centroids to carry forward")
    safe = ad.where(empty, 1.0, mass)
    c = ad.where(empty[:, None], prev, weighted / ad.reshape(safe, (-1, 1)))
    return CentroidState(c, block)


@dataclass
class StackTrace:
    """Centroids ``C^(0..L)``, assignments ``delta^(1..L)`` and the scores each
    assignment was computed from (``scores[l-1]`` pairs ``delta^(l)`` with
    ``C^(l-1)``)."""

    centroids: list = field(default_factory=list)
    assignments: list = field(default_factory=list)
    scores: list = field(default_factory=list)

    @property
    def num_blocks(self) -> int:
        return len(self.assignments)

    @property
    def labels(self) -> np.ndarray:
        # np.argmax resolves ties to the lowest index
        return np.argmax(np.asarray(ad.value_of(self.assignments[-1])), axis=1)

    @property
    def final_centroids(self) -> np.ndarray:
        return np.asarray(ad.value_of(self.centroids[-1]))

    def to_dict(self) -> dict:
        blocks = []
        for l, c in enumerate(self.centroids):
            entry = {"block_index": l, "centroids": np.asarray(ad.value_of(c)).tolist()}
            if l == 0:
                entry["assignments_summary"] = {"cluster_sizes": None, "soft_cluster_sizes": None}
            else:
                delta = np.asarray(ad.value_of(self.assignments[l - 1]))
                k = delta.shape[1]
                hard = np.bincount(np.argmax(delta, axis=1), minlength=k)
                entry["assignments_summary"] = {
                    "cluster_sizes": hard.tolist(),
                    "soft_cluster_sizes": delta.sum(axis=0).tolist(),
                }
            blocks.append(entry)
        return {"num_blocks": self.num_blocks, "blocks": blocks}

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def run_stack(
    Z,
    cfg: BlockStackConfig,
    sp: ScoreParams,
    seed=None,
    init_mode: str = "identity",
    global_normalization: bool = False,
    init=None,
) -> StackTrace:
    """Run ``cfg.num_blocks`` assign/update blocks from the orthonormal init."""
    z_shape = np.shape(ad.value_of(Z))
    if len(z_shape) != 2 or z_shape[1] != cfg.embed_dim:
        raise ShapeError(f"embeddings must be N x {cfg.embed_dim}, got {z_shape}")
    if init is None:
        dtype = np.asarray(ad.value_of(Z)).dtype
        state = init_centroids(cfg, seed, init_mode, dtype=dtype)
    else:
        state = CentroidState(init, 0)
    trace = StackTrace(centroids=[state.centroids])
    for _ in range(cfg.num_blocks):
        act = activated_distances(Z, state.centroids, sp)
        delta = softmax_rows(-act, sp.tau)
        trace.scores.append(-act / sp.tau)
        trace.assignments.append(delta)
        state = update_centroids(Z, delta, state, global_normalization)
        trace.centroids.append(state.centroids)
    return trace
