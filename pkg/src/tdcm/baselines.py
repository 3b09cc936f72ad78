"""Classical clustering baselines: Lloyd k-means, one soft k-means step and
a shared-covariance, uniform-weight Gaussian mixture fitted by EM.

They double as reference implementations for the special cases of the
learned score (identity activation with identity or PD score matrices).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, softmax

EMPTY_MASS = 1e-12


class ConfigurationError(ValueError):
    pass


class NumericalError(ArithmeticError):
    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    iterations: int
    inertia_history: list[float] = field(default_factory=list)


@dataclass
class GmmResult:
    means: np.ndarray
    shared_covariance: np.ndarray
    weights: np.ndarray
    responsibilities: np.ndarray
    log_likelihood: float
    iterations: int = 0
    log_likelihood_history: list[float] = field(default_factory=list)

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.responsibilities, axis=1)


def squared_distances(Z, C) -> np.ndarray:
    diff = Z[:, None, :] - C[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _nearest(Z, C):
    d2 = squared_distances(Z, C)
    labels = np.argmin(d2, axis=1)  # first minimum wins ties
    return labels, float(d2[np.arange(len(Z)), labels].sum())


def kmeans_lloyd(Z, K: int, init, max_iter: int = 300, tol: float = 1e-8) -> KMeansResult:
    Z = np.asarray(Z, dtype=float)
    C = np.array(init, dtype=float)
    if K > len(Z):
        raise ConfigurationError(f"K={K} exceeds the number of samples N={len(Z)}")
    if C.shape != (K, Z.shape[1]):
        raise ConfigurationError(f"init must be {K} x {Z.shape[1]}, got {C.shape}")
    if not np.all(np.isfinite(C)):
        raise ConfigurationError("init centroids must be finite")
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        labels, _ = _nearest(Z, C)
        new = C.copy()
        for j in range(K):
            members = labels == j
            if members.any():
                new[j] = Z[members].mean(axis=0)
        history.append(float(squared_distances(Z, new)[np.arange(len(Z)), labels].sum()))
        shift = float(np.max(np.abs(new - C)))
        C = new
        if shift < tol:
            break
    labels, inertia = _nearest(Z, C)
    history.append(inertia)
    return KMeansResult(C, labels, inertia, it, history)


def kmeans_plus_plus(Z, K: int, seed) -> np.ndarray:
    """Seeded k-means++ seeding (D^2 sampling)."""
    Z = np.asarray(Z, dtype=float)
    rng = np.random.default_rng(seed)
    centers = [Z[rng.integers(len(Z))]]
    for _ in range(1, K):
        d2 = squared_distances(Z, np.array(centers)).min(axis=1)
        total = d2.sum()
        idx = rng.integers(len(Z)) if total == 0 else rng.choice(len(Z), p=d2 / total)
        centers.append(Z[idx])
    return np.array(centers)


def fit_kmeans(Z, K: int, seed=0, n_init: int = 10, max_iter: int = 300, tol: float = 1e-8) -> KMeansResult:
    """Best-inertia Lloyd run over ``n_init`` k-means++ seedings."""
    best = None
    for r in range(n_init):
        res = kmeans_lloyd(Z, K, kmeans_plus_plus(Z, K, [seed, r]), max_iter, tol)
        if best is None or res.inertia < best.inertia:
            best = res
    return best


def soft_kmeans_step(Z, centroids, tau: float):
    """Responsibilities ``softmax_j(-||z_i - c_j||^2 / tau)`` and the new means."""
    if not tau > 0:
        raise ConfigurationError("tau must be positive")
    Z = np.asarray(Z, dtype=float)
    C = np.asarray(centroids, dtype=float)
    delta = softmax(-squared_distances(Z, C) / tau, axis=1)
    mass = delta.sum(axis=0)
    new = C.copy()
    keep = mass >= EMPTY_MASS
    new[keep] = (delta.T @ Z)[keep] / mass[keep, None]
    return delta, new


def fit_soft_kmeans(Z, K: int, tau: float = 1.0, seed=0, max_iter: int = 300, tol: float = 1e-8) -> KMeansResult:
    C = fit_kmeans(Z, K, seed).centroids
    it = 0
    for it in range(1, max_iter + 1):
        _, new = soft_kmeans_step(Z, C, tau)
        shift = float(np.max(np.abs(new - C)))
        C = new
        if shift < tol:
            break
    labels, inertia = _nearest(Z, C)
    return KMeansResult(C, labels, inertia, it, [inertia])


def gmm_estep(Z, means, covariance, iteration: int = 0):
    """Uniform-weight shared-covariance E-step.

    Returns ``(responsibilities, log_likelihood)``.
    """
    Z = np.asarray(Z, dtype=float)
    means = np.asarray(means, dtype=float)
    K, d = means.shape
    try:
        chol = np.linalg.cholesky(covariance)
    except np.linalg.LinAlgError:
        raise NumericalError("shared covariance is not positive-definite", iteration) from None
    # Mahalanobis distances via triangular solves
    diff = Z[:, None, :] - means[None, :, :]
    sol = np.linalg.solve(chol, diff.reshape(-1, d).T).T.reshape(len(Z), K, d)
    maha = np.einsum("nkd,nkd->nk", sol, sol)
    log_det = 2.0 * np.log(np.diag(chol)).sum()
    log_prob = -0.5 * (maha + d * np.log(2 * np.pi) + log_det) - np.log(K)
    norm = logsumexp(log_prob, axis=1)
    return np.exp(log_prob - norm[:, None]), float(norm.sum())


def gmm_em_shared(
    Z,
    K: int,
    init_means,
    shared_cov_init,
    max_iter: int = 300,
    tol: float = 1e-8,
    update_covariance: bool = True,
) -> GmmResult:
    """EM for a Gaussian mixture with fixed uniform weights and one shared covariance.

    With ``update_covariance=False`` only the means move.
    """
    Z = np.asarray(Z, dtype=float)
    means = np.array(init_means, dtype=float)
    cov = np.array(shared_cov_init, dtype=float)
    if means.shape != (K, Z.shape[1]):
        raise ConfigurationError(f"init_means must be {K} x {Z.shape[1]}")
    if not np.allclose(cov, cov.T):
        raise ConfigurationError("shared_cov_init must be symmetric")
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        resp, ll = gmm_estep(Z, means, cov, it)
        history.append(ll)
        mass = resp.sum(axis=0)
        new = means.copy()
        keep = mass >= EMPTY_MASS
        new[keep] = (resp.T @ Z)[keep] / mass[keep, None]
        if update_covariance:
            diff = Z[:, None, :] - new[None, :, :]
            cov = np.einsum("nk,nkd,nke->de", resp, diff, diff) / len(Z)
            cov = (cov + cov.T) / 2
        shift = float(np.max(np.abs(new - means)))
        means = new
        if shift < tol and (len(history) < 2 or abs(history[-1] - history[-2]) < tol * max(1.0, abs(ll))):
            break
    resp, ll = gmm_estep(Z, means, cov, it + 1)
    history.append(ll)
    return GmmResult(means, cov, np.full(K, 1.0 / K), resp, ll, it, history)


def fit_gmm(Z, K: int, seed=0, max_iter: int = 300, tol: float = 1e-8) -> GmmResult:
    """Shared-covariance GMM initialized from the best k-means partition."""
    Z = np.asarray(Z, dtype=float)
    km = fit_kmeans(Z, K, seed)
    diff = Z - km.centroids[km.labels]
    cov = diff.T @ diff / len(Z) + 1e-6 * np.eye(Z.shape[1])
    return gmm_em_shared(Z, K, km.centroids, cov, max_iter, tol)


def transfer_eval_fixed_centroids(source_result, target_Z) -> np.ndarray:
    """Label target samples with centroids frozen after fitting on the source."""
    target_Z = np.asarray(target_Z, dtype=float)
    if isinstance(source_result, GmmResult):
        resp, _ = gmm_estep(target_Z, source_result.means, source_result.shared_covariance)
        return np.argmax(resp, axis=1)
    return _nearest(target_Z, source_result.centroids)[0]
