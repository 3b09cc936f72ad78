"""Adam training loop, transfer evaluation, checkpoints and run records."""
from __future__ import annotations

import base64
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from tdcm import autodiff as ad
from tdcm.datagen import DomainPair, batch_iterator
from tdcm.linalg import ActivationKind
from tdcm.metrics import MetricsReport, evaluate
from tdcm.model import (
    BlockStackConfig,
    ConfigError,
    EncoderParams,
    ScoreParams,
    encode,
    init_encoder,
    run_stack,
)
from tdcm.objectives import LossWeights, alpha_schedule, total_loss

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "tdcm-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    def __init__(self, message, epoch=None, batch=None, last_breakdown=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.last_breakdown = last_breakdown


class PersistenceError(IOError):
    pass


@dataclass
class TrainConfig:
    n_clusters: int = 2
    embed_dim: int = 16
    hidden: tuple[int, ...] = (64, 64)
    encoder_activation: str = "relu"
    num_blocks: int = 4
    tau: float = 1.0
    activation: str = "relu"
    score_mode: str = "symmetric"
    centroid_init: str = "identity"
    alpha_mode: str = "linear"
    beta: float = 1.0
    lambda_orth: float = 1.0
    epochs: int = 500
    batch_size: int = 256
    learning_rate: float = 5e-3
    weight_decay: float = 5e-4
    seed: int = 0
    precision: str = "float64"
    variant_R: bool = False
    variant_O: bool = False
    variant_E: bool = False
    global_normalization: bool = False
    literal_entropy: bool = False
    eval_batch_size: int = 8192

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.epochs < 0 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ConfigError("epochs must be >= 0, batch_size >= 1 and learning_rate > 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.beta < 0 or self.lambda_orth < 0:
            raise ConfigError("beta and lambda_orth must be non-negative")
        if self.eval_batch_size < 1:
            raise ConfigError("eval_batch_size must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.score_mode not in ("symmetric", "psd"):
            raise ConfigError("score_mode must be 'symmetric' or 'psd' (use variant_R for raw matrices)")
        # validate the pieces eagerly so bad configs fail before any compute
        self.stack_config()
        self.loss_weights()
        ActivationKind.parse(self.activation)
        ActivationKind.parse(self.encoder_activation)

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    def stack_config(self) -> BlockStackConfig:
        return BlockStackConfig(self.num_blocks, self.embed_dim, self.n_clusters)

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            tuple(alpha_schedule(self.num_blocks, self.alpha_mode)),
            beta=0.0 if self.variant_E else self.beta,
            lambda_orth=0.0 if self.variant_O else self.lambda_orth,
            literal_entropy=self.literal_entropy,
        )

    @property
    def effective_score_mode(self) -> str:
        return "raw" if self.variant_R else self.score_mode

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- parameters


def init_params(cfg: TrainConfig, input_dim: int) -> dict[str, np.ndarray]:
    enc = init_encoder(
        input_dim, cfg.embed_dim, cfg.hidden, ActivationKind.parse(cfg.encoder_activation),
        seed=[cfg.seed, 0], dtype=cfg.dtype,
    )
    params = {k: np.asarray(v) for k, v in enc.named().items()}
    params["wq_raw"] = np.eye(cfg.embed_dim, dtype=cfg.dtype)
    params["wk_raw"] = np.eye(cfg.embed_dim, dtype=cfg.dtype)
    return params


def model_parts(params, cfg: TrainConfig):
    hidden_act = ActivationKind.parse(cfg.encoder_activation)
    encoder = EncoderParams.from_named(params, [hidden_act] * len(cfg.hidden))
    sp = ScoreParams(
        params["wq_raw"], params["wk_raw"], ActivationKind.parse(cfg.activation), cfg.tau,
        cfg.effective_score_mode,
    )
    return encoder, sp


def forward_pass(params, X, cfg: TrainConfig):
    """Encode ``X`` and run the block stack; returns ``(Z, trace, score_params)``."""
    encoder, sp = model_parts(params, cfg)
    Z = encode(encoder, X)
    trace = run_stack(
        Z, cfg.stack_config(), sp, seed=cfg.seed, init_mode=cfg.centroid_init,
        global_normalization=cfg.global_normalization,
    )
    return Z, trace, sp


def batch_loss(params, X, cfg: TrainConfig):
    Z, trace, sp = forward_pass(params, X, cfg)
    return total_loss(trace, Z, sp, cfg.loss_weights())


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls(0, {k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()})


def adam_step(params, grads, state: AdamState, lr: float, weight_decay: float = 0.0,
              betas=(0.9, 0.999), eps: float = 1e-8):
    """Bias-corrected Adam with decoupled weight decay (applied first)."""
    b1, b2 = betas
    step = state.step + 1
    new_params, m, v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if np.shape(g) != np.shape(p):
            raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {np.shape(p)} for {name}")
        p = p * (1 - lr * weight_decay) if weight_decay else p
        m[name] = b1 * state.m[name] + (1 - b1) * g
        v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m[name] / (1 - b1 ** step)
        v_hat = v[name] / (1 - b2 ** step)
        new_params[name] = (p - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype, copy=False)
    return new_params, AdamState(step, m, v)


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    config: TrainConfig
    params: dict[str, np.ndarray]
    adam: AdamState
    epoch: int = 0
    input_dim: int = 0
    rng_state: dict | None = None
    version: int = CHECKPOINT_VERSION

    def parameter_digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()


def _encode_tensor(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a)
    return {"dtype": a.dtype.str, "shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode_tensor(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"], validate=True)
    return np.frombuffer(raw, dtype=np.dtype(d["dtype"])).reshape(d["shape"]).copy()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    tensors = {f"params/{k}": _encode_tensor(v) for k, v in ckpt.params.items()}
    tensors.update({f"adam_m/{k}": _encode_tensor(v) for k, v in ckpt.adam.m.items()})
    tensors.update({f"adam_v/{k}": _encode_tensor(v) for k, v in ckpt.adam.v.items()})
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": ckpt.version,
        "config": ckpt.config.to_dict(),
        "epoch": ckpt.epoch,
        "input_dim": ckpt.input_dim,
        "adam_step": ckpt.adam.step,
        "rng_state": ckpt.rng_state,
        "tensors": tensors,
        "digest": ckpt.parameter_digest(),
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise PersistenceError(f"checkpoint not found: {path}") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise PersistenceError(f"corrupt checkpoint {path}: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise PersistenceError(f"{path} is not a checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise PersistenceError(
            f"checkpoint version {doc.get('version')} is incompatible with this build (expects {CHECKPOINT_VERSION})"
        )
    try:
        tensors = {k: _decode_tensor(v) for k, v in doc["tensors"].items()}
        config = TrainConfig.from_dict(doc["config"])
        ckpt = Checkpoint(
            config=config,
            params={k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith("params/")},
            adam=AdamState(
                int(doc["adam_step"]),
                {k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith("adam_m/")},
                {k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith("adam_v/")},
            ),
            epoch=int(doc["epoch"]),
            input_dim=int(doc["input_dim"]),
            rng_state=doc.get("rng_state"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise PersistenceError(f"malformed checkpoint {path}: {exc}") from None
    if ckpt.parameter_digest() != doc.get("digest"):
        raise PersistenceError(f"checkpoint {path} failed its integrity check")
    return ckpt


# ---------------------------------------------------------------- training


def train(X, cfg: TrainConfig, log_every: int = 0):
    """Train on ``X`` (rows are samples). Returns ``(checkpoint, loss_history)``.

    ``loss_history`` holds one sample-weighted mean LossBreakdown dict per epoch.
    """
    X = np.asarray(X, dtype=cfg.dtype)
    if not np.all(np.isfinite(X)):
        raise ConfigError("training data contains non-finite values")
    params = init_params(cfg, X.shape[1])
    adam = AdamState.zeros_like(params)
    rng = np.random.default_rng([cfg.seed, 1])
    history = []
    last = None
    for epoch in range(cfg.epochs):
        sums = dict.fromkeys(("clustering", "entropy", "orthogonality", "total"), 0.0)
        order = rng.permutation(len(X))
        for b, idx in enumerate(batch_iterator(len(X), cfg.batch_size)):
            xb = X[order[idx]]
            holder = {}

            def objective(p):
                holder["bd"] = batch_loss(p, xb, cfg)
                return holder["bd"].total

            loss, tape = ad.forward(objective, params)
            breakdown = holder["bd"].as_floats()
            if not np.isfinite(loss) or not all(np.isfinite(v) for v in breakdown.values()):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {b}", epoch, b, last
                )
            grads = ad.backward(tape).grads
            params, adam = adam_step(params, grads, adam, cfg.learning_rate, cfg.weight_decay)
            last = breakdown
            for k in sums:
                sums[k] += breakdown[k] * len(idx)
        record = {k: v / len(X) for k, v in sums.items()}
        record["epoch"] = epoch
        history.append(record)
        if log_every and (epoch % log_every == 0 or epoch == cfg.epochs - 1):
            log.info("epoch %d total %.5f clustering %.5f entropy %.5f orth %.5f",
                     epoch, record["total"], record["clustering"], record["entropy"], record["orthogonality"])
    ckpt = Checkpoint(cfg, params, adam, cfg.epochs, X.shape[1], rng.bit_generator.state)
    return ckpt, history


def predict(ckpt: Checkpoint, X):
    """Hard labels and per-batch traces for ``X`` with no parameter change."""
    cfg = ckpt.config
    X = np.asarray(X, dtype=cfg.dtype)
    if X.ndim != 2 or X.shape[1] != ckpt.input_dim:
        raise ConfigError(f"checkpoint expects {ckpt.input_dim} input features, data has shape {X.shape}")
    labels = np.empty(len(X), dtype=int)
    traces = []
    for idx in batch_iterator(len(X), cfg.eval_batch_size):
        _, trace, _ = forward_pass(ckpt.params, X[idx], cfg)
        labels[idx] = trace.labels
        traces.append(trace)
    return labels, traces


def embed(ckpt: Checkpoint, X) -> np.ndarray:
    encoder, _ = model_parts(ckpt.params, ckpt.config)
    return np.asarray(encode(encoder, np.asarray(X, dtype=ckpt.config.dtype)))


# ---------------------------------------------------------------- run records

METRIC_NAMES = ("nmi", "ari", "acc")


@dataclass
class RunRecord:
    model: str
    config: dict
    source: MetricsReport
    target: MetricsReport
    loss_history: list = field(default_factory=list)
    wall_time: float = 0.0
    metadata: dict = field(default_factory=dict)

    @property
    def diff(self) -> dict[str, float]:
        return {m: getattr(self.source, m) - getattr(self.target, m) for m in METRIC_NAMES}

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "config": self.config,
            "source": self.source.as_dict(),
            "target": self.target.as_dict(),
            "diff": self.diff,
            "loss_history": self.loss_history,
            "wall_time": self.wall_time,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(
            d["model"], d.get("config", {}), MetricsReport(**d["source"]), MetricsReport(**d["target"]),
            d.get("loss_history", []), d.get("wall_time", 0.0), d.get("metadata", {}),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def summary(self) -> str:
        s, t, d = self.source, self.target, self.diff
        return (f"{self.model} NMI/ARI/ACC source {s.nmi:.3f}/{s.ari:.3f}/{s.acc:.3f} | "
                f"target {t.nmi:.3f}/{t.ari:.3f}/{t.acc:.3f} | "
                f"diff {d['nmi']:.3f}/{d['ari']:.3f}/{d['acc']:.3f}")


def evaluate_transfer(ckpt: Checkpoint, pair: DomainPair, loss_history=None, wall_time=0.0) -> RunRecord:
    """Score the trained model on the full source set and on the target set.

    Target centroids are adapted by the forward pass alone.
    """
    if pair.source.X.shape[1] != ckpt.input_dim or pair.target.X.shape[1] != ckpt.input_dim:
        raise ConfigError(
            f"checkpoint expects {ckpt.input_dim} features, pair has "
            f"{pair.source.X.shape[1]}/{pair.target.X.shape[1]}"
        )
    src_labels, _ = predict(ckpt, pair.source.X)
    tgt_labels, _ = predict(ckpt, pair.target.X)
    return RunRecord(
        model="tdcm",
        config=ckpt.config.to_dict(),
        source=evaluate(src_labels, pair.source.labels),
        target=evaluate(tgt_labels, pair.target.labels),
        loss_history=list(loss_history or []),
        wall_time=wall_time,
        metadata={"pair": pair.metadata, "parameter_digest": ckpt.parameter_digest(),
                  "nmi_normalization": "geometric"},
    )


def train_and_evaluate(pair: DomainPair, cfg: TrainConfig):
    start = time.perf_counter()
    ckpt, history = train(pair.source.X, cfg)
    record = evaluate_transfer(ckpt, pair, history)
    record.wall_time = time.perf_counter() - start
    return ckpt, record
