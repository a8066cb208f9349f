"""Diagonal + low-rank Gaussian posteriors over the trainable partition.

The covariance is ``Sigma = (diag(sigma^2) + L L^T) / 2`` and samples are
``w = mu + (sigma * z1 + L @ z2) / sqrt(2)``. Variational parameters are the
three groups ``mu``, ``log_sigma`` and ``L``; flattened and concatenated in
that order they form ``theta``.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import ParamVector
from .errors import NumericError
from .models import ParamPartition, head_mask, nll_loss

GROUPS = ("mu", "log_sigma", "L")
CHECKPOINT_SCHEMA = "sabma.posterior/1"
SIGMA_FLOOR = 1e-6
VAR_FLOOR = 1e-12
MAX_CORE_COND = 1e12
_SQRT2 = np.sqrt(2.0)
_LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class GaussianPosterior:
    mu: np.ndarray
    log_sigma: np.ndarray
    L: np.ndarray
    partition: ParamPartition
    frozen_values: np.ndarray
    registry: dict
    prior_mu: np.ndarray | None = field(default=None, repr=False)
    prior_log_sigma: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.log_sigma = np.asarray(self.log_sigma, dtype=np.float64)
        p1 = self.mu.size
        L = np.asarray(self.L, dtype=np.float64)
        if L.ndim != 2:
            L = L.reshape(p1, -1) if L.size else np.zeros((p1, 0))
        if L.shape[0] != p1:
            raise ValueError("L must have one row per trainable parameter")
        self.L = L
        self.frozen_values = np.asarray(self.frozen_values, dtype=np.float64)
        if self.log_sigma.shape != (p1,):
            raise ValueError("log_sigma must match mu")
        if p1 != self.partition.p1 or self.frozen_values.size != self.partition.p2:
            raise ValueError("posterior shapes disagree with the partition")
        if self.prior_mu is None:
            self.prior_mu = self.mu.copy()
        if self.prior_log_sigma is None:
            self.prior_log_sigma = self.log_sigma.copy()

    @property
    def p1(self) -> int:
        return self.mu.size

    @property
    def K(self) -> int:
        return self.L.shape[1]

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)

    @property
    def num_trainable(self) -> int:
        """Learnable entries of theta: ``(K + 2) * p1``."""
        return (self.K + 2) * self.p1

    def covariance(self) -> np.ndarray:
        """Dense covariance; for tests and small models only."""
        return (np.diag(self.sigma**2) + self.L @ self.L.T) / 2.0

    def theta(self) -> np.ndarray:
        return np.concatenate([self.mu, self.log_sigma, self.L.ravel()])

    def group_slices(self) -> dict[str, slice]:
        p1, K = self.p1, self.K
        return {"mu": slice(0, p1), "log_sigma": slice(p1, 2 * p1), "L": slice(2 * p1, (2 + K) * p1)}

    def with_theta(self, theta: np.ndarray) -> "GaussianPosterior":
        s = self.group_slices()
        return replace(
            self,
            mu=theta[s["mu"]].copy(),
            log_sigma=theta[s["log_sigma"]].copy(),
            L=theta[s["L"]].reshape(self.p1, self.K).copy(),
        )

    def draw_noise(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        return rng.standard_normal(self.p1), rng.standard_normal(self.K)

    def trainable_sample(self, z1: np.ndarray, z2: np.ndarray) -> np.ndarray:
        return self.mu + (self.sigma * z1 + self.L @ z2) / _SQRT2

    def assemble(self, w_s: np.ndarray) -> ParamVector:
        values = np.empty(self.partition.p)
        values[self.partition.trainable] = w_s
        values[self.partition.frozen] = self.frozen_values
        return ParamVector(values, self.registry)

    def mean_params(self) -> ParamVector:
        return self.assemble(self.mu)


def sample(post: GaussianPosterior, seed) -> ParamVector:
    """One full-length weight sample; frozen slots keep their point values."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    z1, z2 = post.draw_noise(rng)
    return post.assemble(post.trainable_sample(z1, z2))


def _core(post: GaussianPosterior):
    d = post.sigma**2
    if post.K == 0:
        return d, None, None
    dinv_l = post.L / d[:, None]
    core = np.eye(post.K) + post.L.T @ dinv_l
    cond = np.linalg.cond(core)
    if not np.isfinite(cond) or cond > MAX_CORE_COND:
        raise NumericError(f"low-rank core is ill-conditioned (cond={cond:.3g})")
    return d, dinv_l, np.linalg.cholesky(core)


def _solve_core(chol, b):
    y = np.linalg.solve(chol, b)
    return np.linalg.solve(chol.T, y)


def log_density(post: GaussianPosterior, w_s: np.ndarray) -> float:
    """Exact log N(w_s; mu, Sigma) via Woodbury and the determinant lemma."""
    r = np.asarray(w_s, dtype=np.float64) - post.mu
    d, dinv_l, chol = _core(post)
    quad = float(r @ (r / d))
    logdet = float(np.log(d).sum())
    if chol is not None:
        t = dinv_l.T @ r
        quad -= float(t @ _solve_core(chol, t))
        logdet += 2.0 * float(np.log(np.diag(chol)).sum())
    # Sigma = A / 2 with A = D + L L^T, so log|Sigma| = log|A| - p log 2 and r^T Sigma^-1 r = 2 r^T A^-1 r
    p = post.p1
    return -0.5 * p * _LOG_2PI + 0.5 * p * np.log(2.0) - 0.5 * logdet - quad


def grad_log_density(post: GaussianPosterior, w_s: np.ndarray) -> dict[str, np.ndarray]:
    """Score of log_density w.r.t. ``mu``, ``log_sigma`` and ``L`` at fixed ``w_s``."""
    r = np.asarray(w_s, dtype=np.float64) - post.mu
    d, dinv_l, chol = _core(post)
    s = r / d
    diag_ainv = 1.0 / d
    if chol is not None:
        core_inv_t = _solve_core(chol, dinv_l.T)  # C^-1 (D^-1 L)^T
        s = s - dinv_l @ (core_inv_t @ r)
        ainv_l = core_inv_t.T  # A^-1 L = D^-1 L C^-1
        diag_ainv = diag_ainv - np.einsum("ik,ki->i", dinv_l, core_inv_t)
        g_l = -ainv_l + 2.0 * np.outer(s, s @ post.L)
    else:
        g_l = np.zeros_like(post.L)
    # d/dA of log q is G = -A^-1/2 + s s^T with s = A^-1 r
    g_mu = 2.0 * s
    g_log_sigma = 2.0 * d * (-0.5 * diag_ainv + s * s)
    return {"mu": g_mu, "log_sigma": g_log_sigma, "L": g_l}


def reparam_grads(post: GaussianPosterior, grad_w: np.ndarray, z1: np.ndarray, z2: np.ndarray) -> dict:
    """Chain a gradient w.r.t. the sampled trainable weights back to theta."""
    return {
        "mu": grad_w.copy(),
        "log_sigma": grad_w * post.sigma * z1 / _SQRT2,
        "L": np.outer(grad_w, z2) / _SQRT2,
    }


class SwagCollector:
    """Running first/second moments plus the last ``K`` deviation snapshots."""

    def __init__(self, K: int, partition: ParamPartition, registry: dict):
        if K < 0:
            raise ValueError("K must be non-negative")
        self.K = K
        self.partition = partition
        self.registry = registry
        self.n = 0
        self.mean = np.zeros(partition.p1)
        self.sq_mean = np.zeros(partition.p1)
        self.deviations: deque = deque(maxlen=K if K else None)
        self.frozen_values = None

    def collect(self, params: ParamVector) -> None:
        w = params.values[self.partition.trainable]
        self.n += 1
        self.mean += (w - self.mean) / self.n
        self.sq_mean += (w * w - self.sq_mean) / self.n
        if self.K:
            self.deviations.append(w - self.mean)
        self.frozen_values = params.values[self.partition.frozen].copy()


def swag_fit(collector: SwagCollector) -> GaussianPosterior:
    K = collector.K
    if collector.n < max(2, K + 1):
        raise ValueError(f"swag_fit needs at least {max(2, K + 1)} snapshots, got {collector.n}")
    var = np.maximum(collector.sq_mean - collector.mean**2, VAR_FLOOR)
    if K:
        scale = 1.0 / np.sqrt(K - 1) if K >= 2 else 1.0
        L = np.stack(list(collector.deviations), axis=1) * scale
    else:
        L = np.zeros((collector.mean.size, 0))
    return GaussianPosterior(
        mu=collector.mean.copy(),
        log_sigma=0.5 * np.log(var),
        L=L,
        partition=collector.partition,
        frozen_values=collector.frozen_values,
        registry=collector.registry,
    )


def moped_from_dnn(params: ParamVector, partition: ParamPartition, delta: float = 0.05,
                   alpha: float = 1e-4, K: int = 0) -> GaussianPosterior:
    """Mean-field posterior centred on pretrained weights with ``sigma = delta*|w|``.

    Last-layer entries are reset to ``mu = 0, sigma = sqrt(alpha)``. ``K`` zero
    columns of ``L`` are allocated so the low-rank factor can be trained.
    """
    if delta <= 0 or alpha <= 0:
        raise ValueError("delta and alpha must be positive")
    w = params.values[partition.trainable]
    mu = w.copy()
    sigma = np.maximum(delta * np.abs(w), SIGMA_FLOOR)
    head = head_mask(params.registry, partition.trainable)
    mu[head] = 0.0
    sigma[head] = np.sqrt(alpha)
    return GaussianPosterior(
        mu=mu,
        log_sigma=np.log(sigma),
        L=np.zeros((w.size, K)),
        partition=partition,
        frozen_values=params.values[partition.frozen].copy(),
        registry=params.registry,
    )


def kl_to_prior(post: GaussianPosterior) -> float:
    """KL between the diagonal parts of the posterior and its recorded prior."""
    v1 = np.exp(2.0 * post.log_sigma) / 2.0
    v0 = np.exp(2.0 * post.prior_log_sigma) / 2.0
    diff = post.mu - post.prior_mu
    return float(0.5 * np.sum(v1 / v0 + diff * diff / v0 - 1.0 + np.log(v0 / v1)))


def kl_grads(post: GaussianPosterior) -> dict[str, np.ndarray]:
    v1 = np.exp(2.0 * post.log_sigma) / 2.0
    v0 = np.exp(2.0 * post.prior_log_sigma) / 2.0
    return {"mu": (post.mu - post.prior_mu) / v0, "log_sigma": v1 / v0 - 1.0, "L": np.zeros_like(post.L)}


def elbo_loss(model, post: GaussianPosterior, batch, sample_w: ParamVector, beta: float) -> float:
    """Single-sample negative ELBO: NLL at ``sample_w`` plus ``beta`` times the diagonal KL."""
    loss = nll_loss(model, sample_w, batch, 0.0)
    if beta:
        loss += beta * kl_to_prior(post)
    return loss


# -- checkpoint I/O ------------------------------------------------------------


def posterior_to_dict(post: GaussianPosterior) -> dict:
    return {
        "schema": CHECKPOINT_SCHEMA,
        "p1": post.p1,
        "K": post.K,
        "mu": post.mu.tolist(),
        "log_sigma": post.log_sigma.tolist(),
        "L": post.L.ravel().tolist(),
        "prior_mu": post.prior_mu.tolist(),
        "prior_log_sigma": post.prior_log_sigma.tolist(),
        "trainable": post.partition.trainable.tolist(),
        "frozen": post.partition.frozen.tolist(),
        "policy": post.partition.policy,
        "frozen_values": post.frozen_values.tolist(),
        "registry": {k: [s, e, list(shape)] for k, (s, e, shape) in post.registry.items()},
    }


def posterior_from_dict(doc: dict) -> GaussianPosterior:
    if doc.get("schema") != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported posterior checkpoint schema {doc.get('schema')!r}")
    p1, K = int(doc["p1"]), int(doc["K"])
    partition = ParamPartition(np.array(doc["trainable"], dtype=np.int64),
                               np.array(doc["frozen"], dtype=np.int64), doc.get("policy", "custom"))
    return GaussianPosterior(
        mu=np.array(doc["mu"]),
        log_sigma=np.array(doc["log_sigma"]),
        L=np.array(doc["L"], dtype=np.float64).reshape(p1, K),
        partition=partition,
        frozen_values=np.array(doc["frozen_values"]),
        registry={k: (s, e, tuple(shape)) for k, (s, e, shape) in doc["registry"].items()},
        prior_mu=np.array(doc["prior_mu"]),
        prior_log_sigma=np.array(doc["prior_log_sigma"]),
    )


def save_posterior(post: GaussianPosterior, path) -> None:
    Path(path).write_text(json.dumps(posterior_to_dict(post)))


def load_posterior(path) -> GaussianPosterior:
    return posterior_from_dict(json.loads(Path(path).read_text()))
